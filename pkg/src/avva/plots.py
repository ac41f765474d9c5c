"""Optional PNG rendering for run artifacts (requires matplotlib)."""

from pathlib import Path

from . import evaluation


def _mpl():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("plotting requires matplotlib (`pip install avva[plots]`)") from exc
    return plt


def plot_shift_curves(curves, path) -> Path:
    plt = _mpl()
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, curve in zip(axes.ravel(), curves):
        ax.plot(curve.shifts, curve.mean_similarity, marker="o")
        ax.set_title(curve.panel.value.replace("_", " "), fontsize=9)
        ax.axvline(0.0, color="grey", linewidth=0.6)
        ax.set_xlabel("shift (s)")
        ax.set_ylabel("mean cosine")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sweep(points, path, direction=None) -> Path:
    """Accuracy versus retained hours across curation thresholds."""
    plt = _mpl()
    direction = direction or evaluation.Direction.A2V
    fig, ax = plt.subplots(figsize=(6, 4))
    hours = [p.retained_hours for p in points]
    ks = sorted(points[0].reports[direction].per_k) if points else []
    for k in ks:
        means = [p.reports[direction].mean(k) for p in points]
        stds = [p.reports[direction].std(k) for p in points]
        ax.errorbar(hours, means, yerr=stds, marker="o", capsize=3, label=f"top-{k}")
    ax.set_xlabel("retained training hours")
    ax.set_ylabel(f"accuracy % ({direction.value})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_run_plots(run_dir) -> list:
    """Render whatever artifacts exist in a run directory."""
    run_dir = Path(run_dir)
    written = []
    shift_csv = run_dir / "shift_curves.csv"
    if shift_csv.exists():
        curves = evaluation.shift_curves_from_csv(shift_csv.read_text(encoding="utf-8"))
        written.append(plot_shift_curves(curves, run_dir / "shift_curves.png"))
    return written
