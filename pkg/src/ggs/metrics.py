"""Image quality metrics and the per-lane evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import make_virtual_pose
from .scene import ImageBuffer

__all__ = ["psnr", "ssim", "EvalReport", "lane_eval", "write_report"]

PSNR_CAP = 99.0


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) on the [0, 1] range, capped at 99 dB."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable windowed mean over fully interior windows ('valid' extent)."""
    k = win.size
    h, w = img.shape
    tmp = np.zeros((h, w - k + 1))
    for i in range(k):
        tmp += win[i] * img[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += win[i] * tmp[i : i + h - k + 1]
    return out


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5) on the
    RGB-mean luminance, averaged over fully valid windows."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    la = pa.mean(axis=2) if pa.ndim == 3 else pa
    lb = pb.mean(axis=2) if pb.ndim == 3 else pb
    if min(la.shape) < window:
        raise ValueError(f"image side {min(la.shape)} smaller than the {window}-pixel window")
    win = _gaussian_window(window, sigma)
    mu1 = _filter_valid(la, win)
    mu2 = _filter_valid(lb, win)
    s11 = _filter_valid(la * la, win) - mu1 * mu1
    s22 = _filter_valid(lb * lb, win) - mu2 * mu2
    s12 = _filter_valid(la * lb, win) - mu1 * mu2
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1**2 + mu2**2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    """Per-image PSNR/SSIM rows tagged by lane, plus notices for skipped tags."""

    rows: list[tuple[str, str, float, float]] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)

    def add(self, tag: str, name: str, p: float, s: float):
        if not (-1.0 <= s <= 1.0) or p > PSNR_CAP:
            raise ValueError("metric out of range")
        self.rows.append((tag, name, p, s))

    def tags(self) -> list[str]:
        seen = []
        for tag, *_ in self.rows:
            if tag not in seen:
                seen.append(tag)
        return seen

    def mean_psnr(self, tag: str | None = None) -> float:
        vals = [p for t, _, p, _ in self.rows if tag is None or t == tag]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_ssim(self, tag: str | None = None) -> float:
        vals = [s for t, _, _, s in self.rows if tag is None or t == tag]
        return float(np.mean(vals)) if vals else float("nan")


def lane_eval(state, lane_truth: dict[str, list], offsets: dict[str, float] | None = None,
              min_side: int = 11) -> EvalReport:
    """Render each lane's poses from a trained state and score them against
    ground truth.

    ``lane_truth`` maps a lane tag to rows of (camera, image, mask-or-None);
    tags with no rows are skipped with a notice. When ``offsets`` is given the
    render pose is the middle-lane camera shifted laterally by the tag's
    offset instead of the stored ground-truth camera.
    """
    report = EvalReport()
    for tag, rows in lane_truth.items():
        if not rows:
            report.notices.append(f"lane {tag!r}: no ground truth, skipped")
            continue
        for k, (cam, img, _mask) in enumerate(rows):
            if offsets and tag in offsets:
                cam = make_virtual_pose(cam, offsets[tag])
            out = state.render(cam)
            name = f"{tag}/frame_{k:04d}"
            s = ssim(img, out.color) if min(img.pixels.shape[:2]) >= min_side else float("nan")
            report.add(tag, name, psnr(img, out.color), s)
    return report


def write_report(report: EvalReport, path):
    """One row per image (path, lane, psnr, ssim) plus mean summary rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# path lane psnr ssim\n")
        for tag, name, p, s in report.rows:
            fh.write(f"{name} {tag} {p:.4f} {s:.6f}\n")
        for tag in report.tags():
            fh.write(f"mean/{tag} {tag} {report.mean_psnr(tag):.4f} {report.mean_ssim(tag):.6f}\n")
        if report.rows:
            fh.write(f"mean/all all {report.mean_psnr():.4f} {report.mean_ssim():.6f}\n")
        for notice in report.notices:
            fh.write(f"# {notice}\n")
