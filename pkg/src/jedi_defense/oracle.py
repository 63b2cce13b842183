"""Model oracles: the builtin patch-sensitive toy classifier and a subprocess bridge.

Wire protocol for external models is line-delimited JSON on the child's
stdin/stdout. Request ``{"id": int, "png_base64": str}``, response
``{"id": int, "label": str}``. Run ``python -m jedi_defense.oracle_server`` to serve
the toy oracle over the same protocol.
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import shlex
import subprocess
import sys
from typing import Protocol

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from jedi_defense.entropy import WindowGeometry, compute_heatmap
from jedi_defense.errors import OracleError
from jedi_defense.imagecore import check_image, to_gray

HIJACKED = "hijacked"
DEFAULT_TRIP = 5.0


class ModelOracle(Protocol):
    def predict(self, image: np.ndarray) -> str: ...


def encode_png(image: np.ndarray) -> str:
    check_image(image)
    buf = io.BytesIO()
    arr = image[:, :, 0] if image.ndim == 3 and image.shape[2] == 1 else image
    PILImage.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with PILImage.open(io.BytesIO(base64.b64decode(data))) as pil:
        pil.load()
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        return np.array(pil, dtype=np.uint8)


def _fit_background(gray: np.ndarray, offset_cut: float, iterations: int = 4) -> np.ndarray:
    """Robust least-squares plane through the pixels not covered by shapes."""
    h, w = gray.shape
    yy, xx = np.mgrid[0:h, 0:w]
    design = np.stack([np.ones(h * w), xx.ravel() / w, yy.ravel() / h], axis=1)
    target = gray.astype(np.float64).ravel()
    inliers = np.ones(h * w, dtype=bool)
    plane = np.full(h * w, target.mean())
    for _ in range(iterations):
        if inliers.sum() < 3:
            break
        coef, *_ = np.linalg.lstsq(design[inliers], target[inliers], rcond=None)
        plane = design @ coef
        inliers = np.abs(target - plane) <= offset_cut
    return plane.reshape(h, w)


def classify_dominant_shape(image: np.ndarray, offset_cut: float = 25.0, rect_fill: float = 0.9) -> str:
    """Kind of the largest flat shape standing out from a planar background.

    A component filling at least ``rect_fill`` of its bounding box is a
    rectangle; ellipses fill about pi/4.
    """
    gray = to_gray(image)
    residual = gray.astype(np.float64) - _fit_background(gray, offset_cut)
    fg = np.abs(residual) > offset_cut
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return "none"
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    biggest = int(np.argmax(sizes))
    if sizes[biggest] < 0.01 * gray.size:
        return "none"
    ys, xs = np.nonzero(labels == biggest)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    return "rectangle" if sizes[biggest] / box >= rect_fill else "ellipse"


def max_region_entropy(image: np.ndarray, region: int = 50, geometry: WindowGeometry = WindowGeometry(8, 4)) -> float:
    """Largest mean local entropy over any ``region x region`` pixel block (window-grid aligned)."""
    grid = compute_heatmap(image, geometry).grid
    cells = max(1, (region - geometry.window) // geometry.stride + 1)
    ch, cw = min(cells, grid.shape[0]), min(cells, grid.shape[1])
    integral = np.pad(grid.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
    sums = integral[ch:, cw:] - integral[:-ch, cw:] - integral[ch:, :-cw] + integral[:-ch, :-cw]
    return float(sums.max() / (ch * cw))


class ToyOracle:
    """Labels a scene by its dominant shape, unless some 50x50 region is too busy.

    A region whose mean local entropy exceeds ``trip`` makes the oracle answer
    ``"hijacked"``; this is the stand-in for a patch-vulnerable classifier.
    """

    def __init__(self, trip: float = DEFAULT_TRIP, region: int = 50):
        self.trip = trip
        self.region = region

    def predict(self, image: np.ndarray) -> str:
        check_image(image)
        if min(image.shape[:2]) >= 8 and max_region_entropy(image, self.region) > self.trip:
            return HIJACKED
        return classify_dominant_shape(image)


class SubprocessOracle:
    """Talks to an external model process over line-delimited JSON."""

    def __init__(self, command, timeout: float | None = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise OracleError(f"cannot start oracle {self.command!r}: {exc}") from exc

    def predict(self, image: np.ndarray) -> str:
        req_id = self._next_id
        self._next_id += 1
        if self._proc.poll() is not None:
            raise OracleError(f"oracle process exited with code {self._proc.returncode}", sample_id=req_id)
        line = json.dumps({"id": req_id, "png_base64": encode_png(image)})
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
            reply = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle pipe failed: {exc}", sample_id=req_id) from exc
        if not reply:
            raise OracleError("oracle closed its output", sample_id=req_id)
        try:
            msg = json.loads(reply)
            got_id, label = msg["id"], msg["label"]
        except (ValueError, KeyError, TypeError) as exc:
            raise OracleError(f"malformed oracle response {reply.strip()!r}", sample_id=req_id) from exc
        if got_id != req_id:
            raise OracleError(f"response id {got_id} does not match request {req_id}", sample_id=req_id)
        return str(label)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(oracle: ModelOracle, stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        msg = json.loads(line)
        label = oracle.predict(decode_png(msg["png_base64"]))
        stdout.write(json.dumps({"id": msg["id"], "label": label}) + "\n")
        stdout.flush()


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="Serve the toy oracle over line-delimited JSON.")
    parser.add_argument("--trip", type=float, default=DEFAULT_TRIP)
    parser.add_argument("--region", type=int, default=50)
    args = parser.parse_args(argv)
    serve(ToyOracle(trip=args.trip, region=args.region))


if __name__ == "__main__":
    main()
