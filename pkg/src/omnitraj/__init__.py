"""OmniTraj: frame-rate-conditioned multi-agent trajectory forecasting at desk scale."""

__version__ = "0.1.0"
