"""Pluggable denoiser priors for the multi-lane loss.

A prior refines a batch of lane renders at a given noise level t in [0, 1]
and returns images of the same shape with values in [0, 1]. The reference
implementation is a fixed smoothing operator (Gaussian blur with sigma
proportional to t followed by a small median filter); `RemoteDenoiser` sends
the batch to an external service speaking a small binary protocol, so a real
diffusion model can be plugged in without new code here.
"""

from __future__ import annotations

import struct
import urllib.error
import urllib.request

import numpy as np
from scipy import ndimage

from .scene import ImageBuffer

__all__ = ["DenoiserPrior", "IdentityPrior", "ReferencePrior", "RemoteDenoiser", "make_prior"]


class DenoiserPrior:
    """Interface: refine(images, noise_level) -> images of identical shapes."""

    def refine(self, images: list[ImageBuffer], noise_level: float) -> list[ImageBuffer]:
        raise NotImplementedError


class IdentityPrior(DenoiserPrior):
    def refine(self, images, noise_level):
        return list(images)


class ReferencePrior(DenoiserPrior):
    """Gaussian blur with sigma = sigma_scale * t, then a 3x3 median filter."""

    def __init__(self, sigma_scale: float = 2.0, median_size: int = 3):
        self.sigma_scale = float(sigma_scale)
        self.median_size = int(median_size)

    def refine(self, images, noise_level):
        t = float(noise_level)
        if not (0.0 <= t <= 1.0):
            raise ValueError("noise level must lie in [0, 1]")
        out = []
        for img in images:
            px = img.pixels
            sigma = self.sigma_scale * t
            if sigma > 0:
                px = ndimage.gaussian_filter(px, sigma=(sigma, sigma, 0), mode="nearest")
            if self.median_size > 1:
                px = ndimage.median_filter(px, size=(self.median_size, self.median_size, 1),
                                           mode="nearest")
            out.append(ImageBuffer(np.clip(px, 0.0, 1.0)))
        return out


class RemoteDenoiser(DenoiserPrior):
    """Client for an external denoising service.

    Request body (little-endian): u32 width, u32 height, u32 image count,
    f32 pixels for each image (row-major RGB), f32 noise level, u16 text
    length, UTF-8 text. The response mirrors the image payload: u32 width,
    u32 height, u32 count, f32 pixels.
    """

    def __init__(self, url: str, timeout_ms: int = 10000, text: str = ""):
        self.url = url
        self.timeout_ms = int(timeout_ms)
        self.text = text

    def encode_request(self, images: list[ImageBuffer], noise_level: float) -> bytes:
        w, h = images[0].width, images[0].height
        parts = [struct.pack("<III", w, h, len(images))]
        for img in images:
            if img.width != w or img.height != h:
                raise ValueError("all images in one request must share a resolution")
            parts.append(img.pixels.astype("<f4").tobytes())
        text = self.text.encode("utf-8")
        parts.append(struct.pack("<f", float(noise_level)))
        parts.append(struct.pack("<H", len(text)))
        parts.append(text)
        return b"".join(parts)

    @staticmethod
    def decode_response(body: bytes) -> list[ImageBuffer]:
        if len(body) < 12:
            raise ValueError("denoiser response shorter than its 12-byte header")
        w, h, n = struct.unpack_from("<III", body, 0)
        need = 12 + n * w * h * 3 * 4
        if len(body) != need:
            raise ValueError(f"denoiser response has {len(body)} bytes, expected {need}")
        px = np.frombuffer(body, dtype="<f4", offset=12).astype(np.float64)
        px = px.reshape(n, h, w, 3)
        return [ImageBuffer(np.clip(px[i], 0.0, 1.0)) for i in range(n)]

    def refine(self, images, noise_level):
        req = urllib.request.Request(
            self.url, data=self.encode_request(images, noise_level),
            headers={"Content-Type": "application/octet-stream"}, method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_ms / 1000.0) as resp:
                body = resp.read()
        except urllib.error.URLError as exc:
            raise RuntimeError(f"denoiser service at {self.url} failed: {exc}") from exc
        out = self.decode_response(body)
        if len(out) != len(images) or out[0].pixels.shape != images[0].pixels.shape:
            raise ValueError("denoiser response shape does not match the request")
        return out


def make_prior(kind: str, url: str = "", timeout_ms: int = 10000,
               text: str = "", sigma_scale: float = 2.0) -> DenoiserPrior:
    if kind == "identity":
        return IdentityPrior()
    if kind == "reference":
        return ReferencePrior(sigma_scale=sigma_scale)
    if kind == "remote":
        if not url:
            raise ValueError("remote denoiser requires a url")
        return RemoteDenoiser(url, timeout_ms, text)
    raise ValueError(f"unknown denoiser kind {kind!r}")
