"""Figure rendering for CLI reports: PNGs written next to the CSV/JSON outputs.

Matplotlib is imported lazily and only here; the library core stays free of
plotting so reports remain scriptable from the delimited outputs alone.
"""

from __future__ import annotations


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_invariance(rows: list[dict], out_path) -> None:
    """Grouped bars of exact-match rate per cloud and mode."""
    plt = _pyplot()
    clouds = sorted({r["cloud"] for r in rows})
    modes = sorted({r["mode"] for r in rows})
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(clouds)), 4))
    width = 0.8 / max(1, len(modes))
    for mi, mode in enumerate(modes):
        xs, ys = [], []
        for ci, cloud in enumerate(clouds):
            match = [r for r in rows if r["cloud"] == cloud and r["mode"] == mode]
            if match:
                xs.append(ci + mi * width)
                ys.append(match[0]["exact_rate"])
        ax.bar(xs, ys, width=width, label=mode)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(clouds))])
    ax.set_xticklabels(clouds, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("exact ordering match rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_bench(rows: list[dict], out_path) -> None:
    """Log-log preprocessing time and memory against token count."""
    plt = _pyplot()
    tokens = [r["tokens"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.loglog(tokens, [r["time_ms"] for r in rows], "o-")
    ax1.set_xlabel("tokens")
    ax1.set_ylabel("time (ms)")
    ax1.grid(True, which="both", alpha=0.3)
    ax2.loglog(tokens, [max(1, r["mem_bytes"]) for r in rows], "s-", color="tab:red")
    ax2.set_xlabel("tokens")
    ax2.set_ylabel("peak traced memory (bytes)")
    ax2.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_metrics(rows: list[tuple], out_path) -> None:
    """Loss (and accuracy when present) per epoch and split."""
    plt = _pyplot()
    splits = sorted({r[1] for r in rows})
    has_acc = any(r[3] not in ("", None) for r in rows)
    fig, axes = plt.subplots(1, 2 if has_acc else 1, figsize=(9 if has_acc else 5, 4))
    ax_loss = axes[0] if has_acc else axes
    for split in splits:
        pts = [(r[0], r[2]) for r in rows if r[1] == split]
        ax_loss.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(alpha=0.3)
    if has_acc:
        for split in splits:
            pts = [(r[0], r[3]) for r in rows if r[1] == split and r[3] not in ("", None)]
            if pts:
                axes[1].plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=split)
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("accuracy")
        axes[1].legend()
        axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
