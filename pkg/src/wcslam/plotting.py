"""Minimal SVG line charts of per-frame motion error (optional, needs matplotlib)."""

from __future__ import annotations

from pathlib import Path


def write_me_svg(path: Path, obj: int, series: list[tuple[str, dict]], labels: list[str]) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("SVG output needs matplotlib") from exc
    matplotlib.rcParams["svg.hashsalt"] = "wcslam"
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for suffix, rows in series:
        pts = sorted((k[0], v) for k, v in rows.items() if k[1] == obj)
        if not pts:
            continue
        frames = [p[0] for p in pts]
        name = suffix.lstrip("_") or labels[0]
        axes[0].plot(frames, [p[1][0] for p in pts], marker=".", label=name)
        axes[1].plot(frames, [p[1][1] for p in pts], marker=".", label=name)
    axes[0].set_ylabel("ME_t [m]")
    axes[1].set_ylabel("ME_r [deg]")
    axes[1].set_xlabel("frame")
    axes[0].set_title(f"object {obj}")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
