"""Figures for run reports: loss curves, rendered view grids and point scatters.

Everything draws on a private Agg canvas, so no display and no global pyplot state.
"""

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

TERMS = ("sc", "ic", "hd", "un", "joint")
STYLE = {"font.size": 8, "axes.titlesize": 9, "axes.labelsize": 8, "legend.fontsize": 7}


def _figure(width, height):
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    return fig


def _save(fig, path):
    # no Software tag so identical inputs give identical bytes
    fig.savefig(path, metadata={"Software": None})


def plot_trace(trace, path, weights=None, title="loss"):
    """Log-scale loss curves, one line per term; terms are weighted when ``weights`` is given."""
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig = _figure(5.0, 3.2)
        ax = fig.add_subplot()
        steps = np.arange(len(trace.reports))
        for key in TERMS:
            values = np.array([getattr(r, key) for r in trace.reports])
            if weights is not None and key != "joint":
                values = values * getattr(weights, key)
            positive = values > 0
            if not positive.any():
                continue
            style = {"color": "k", "lw": 1.6} if key == "joint" else {"lw": 1.0}
            ax.plot(steps[positive], values[positive], label=key, **style)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("weighted loss" if weights is not None else "loss")
        ax.set_title(title)
        ax.grid(True, which="major", alpha=0.3)
        ax.legend(loc="upper center", bbox_to_anchor=(0.5, -0.18), ncol=5, frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_views(images, path, titles=None, columns=4):
    """Grid of silhouette images (values in [0, 1]), top row of each image at the top."""
    import matplotlib

    images = np.asarray(images, float)
    m = len(images)
    cols = max(1, min(columns, m))
    rows = -(-m // cols)
    with matplotlib.rc_context(STYLE):
        fig = _figure(1.6 * cols, 1.7 * rows)
        for j in range(m):
            ax = fig.add_subplot(rows, cols, j + 1)
            ax.imshow(images[j], cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_title(titles[j] if titles else f"view {j}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        _save(fig, path)


def plot_clouds(sparse, dense, path, title="upsampling"):
    """Side-by-side 3D scatters of the input and the upsampled cloud."""
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig = _figure(7.0, 3.4)
        for j, (pts, label) in enumerate(((sparse, "input"), (dense, "output"))):
            pts = np.asarray(pts, float)
            ax = fig.add_subplot(1, 2, j + 1, projection="3d")
            ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=2, c=pts[:, 2], cmap="viridis", depthshade=False)
            ax.set_title(f"{label} ({len(pts)} points)")
            ax.set_box_aspect((1, 1, 1))
            ax.set_axis_off()
        fig.suptitle(title)
        _save(fig, path)
