"""Static SVG charts for ablation tables (byte-stable across runs)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "omnitraj", "svg.fonttype": "none"}


def _save(fig, path):
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def bar_chart(path, labels, medians, lows, highs, ylabel="minADE (m)", title=""):
    """Bars at the median with min/max whiskers."""
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = range(len(labels))
        err = [[m - lo for m, lo in zip(medians, lows)], [hi - m for m, hi in zip(medians, highs)]]
        ax.bar(x, medians, yerr=err, capsize=4, color="#4c72b0")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=20)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
    _save(fig, path)


def line_chart(path, series, xlabel="n", ylabel="minADE (m)", title="", logx=True):
    """``series``: {label: [(x, y), ...]}; one line per label."""
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, pts in series.items():
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", label=label)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
    _save(fig, path)


def table_chart(path, table, metric="min_ade_k", title=""):
    rows = [r for r in table.summary((metric,))]
    bar_chart(path, [r["row"] for r in rows], [r["median"] for r in rows],
              [r["min"] for r in rows], [r["max"] for r in rows], title=title or table.name)
