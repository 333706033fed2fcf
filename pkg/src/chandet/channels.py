"""Analytic channel features: LUV color, gradient magnitude, oriented-gradient
histograms, the combined 10-channel stack, and the heatmap blur.

Every operation is a pure function of its inputs. Images are C x H x W
float arrays with values in [0, 1]; channel maps carry a `kind` tag that
selects the pixel loss used when the map serves as training supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CHANNEL_KINDS = ("binary", "multiclass", "regression")

# Segmentation codes: background=0, pedestrian=1, cyclist=2, distractor=3.
SEGMENTATION_CLASSES = ("background", "pedestrian", "cyclist", "distractor")

# name -> (kind, channel count, class_count)
CHANNEL_CATALOG = {
    "icf": ("regression", 10, None),
    "edge": ("binary", 1, None),
    "segmentation": ("multiclass", 1, len(SEGMENTATION_CLASSES)),
    "heatmap": ("binary", 1, None),
    "disparity": ("regression", 1, None),
    "flow": ("regression", 2, None),
    "raw-image": ("regression", 3, None),
}

HOG_BIN_COUNT = 6
HOG_CELL_SIZE = 4
STD_FLOOR = 1e-6


@dataclass(eq=False)
class ChannelMap:
    """A C x H x W channel-feature grid with the loss-selecting kind tag.

    binary:     C == 1, values in [0, 1]
    multiclass: C == 1 with integer codes in [0, class_count), or
                C == class_count with per-pixel distributions summing to 1
    regression: any finite values
    """

    data: np.ndarray
    kind: str
    class_count: int | None = None
    name: str = field(default="")

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"channel data must be C x H x W, got shape {self.data.shape}")
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("channel data must be finite")
        c = self.data.shape[0]
        if self.kind == "binary":
            if c != 1:
                raise ValueError(f"binary maps must have 1 channel, got {c}")
            if self.data.min() < 0.0 or self.data.max() > 1.0:
                raise ValueError("binary map values must lie in [0, 1]")
        elif self.kind == "multiclass":
            if self.class_count is None or self.class_count < 2:
                raise ValueError("multiclass maps require class_count >= 2")
            if c == 1:
                if not np.array_equal(self.data, np.round(self.data)):
                    raise ValueError("integer-coded multiclass map has fractional values")
                if self.data.min() < 0 or self.data.max() >= self.class_count:
                    raise ValueError("multiclass codes out of range")
            elif c == self.class_count:
                sums = self.data.sum(axis=0)
                if np.abs(sums - 1.0).max() > 1e-5:
                    raise ValueError("multiclass distributions must sum to 1 per pixel")
            else:
                raise ValueError(
                    f"multiclass map must have 1 or class_count={self.class_count} "
                    f"channels, got {c}"
                )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _as_chw(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"image must be (C,H,W) or (H,W), got shape {arr.shape}")
    return arr


# sRGB (D65) linear-RGB -> XYZ. The white point is the matrix row sums so a
# pure white pixel lands exactly on it (L*=100, u*=v*=0).
_SRGB_TO_XYZ = np.array(
    [
        [0.412456439089692, 0.357576077643909, 0.180437483266399],
        [0.212672851405623, 0.715152155287818, 0.072174993306560],
        [0.019333895582329, 0.119192025881303, 0.950304078536368],
    ]
)
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_CIE_EPS = (6.0 / 29.0) ** 3
_CIE_KAPPA = (29.0 / 3.0) ** 3


def _srgb_linearize(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_luv(image: np.ndarray) -> ChannelMap:
    """Convert a 3 x H x W sRGB image in [0,1] to CIE L*u*v* (D65 white).

    L* lies in [0, 100]; u* and v* are 0 for achromatic pixels. Black maps
    exactly to the origin.
    """
    arr = _as_chw(image)
    if arr.shape[0] != 3:
        raise ValueError("rgb_to_luv expects a 3-channel image")
    linear = _srgb_linearize(np.clip(arr, 0.0, 1.0))
    xyz = np.einsum("ij,jhw->ihw", _SRGB_TO_XYZ, linear)
    x, y, z = xyz
    yr = y / _WHITE[1]
    lstar = np.where(yr > _CIE_EPS, 116.0 * np.cbrt(yr) - 16.0, _CIE_KAPPA * yr)

    denom = x + 15.0 * y + 3.0 * z
    wdenom = _WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2]
    up_n = 4.0 * _WHITE[0] / wdenom
    vp_n = 9.0 * _WHITE[1] / wdenom
    safe = denom > 1e-12
    up = np.where(safe, 4.0 * x / np.where(safe, denom, 1.0), up_n)
    vp = np.where(safe, 9.0 * y / np.where(safe, denom, 1.0), vp_n)
    ustar = 13.0 * lstar * (up - up_n)
    vstar = 13.0 * lstar * (vp - vp_n)
    luv = np.stack([lstar, ustar, vstar]).astype(np.float32)
    return ChannelMap(luv, "regression", name="luv")


def _axis_gradients(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # central differences inside, one-sided at the borders
    gy, gx = np.gradient(plane)
    return gy, gx


def gradient_magnitude(image: np.ndarray) -> ChannelMap:
    """Central-difference gradient magnitude (1 x H x W).

    For 3-channel input the response is the per-pixel maximum over the
    per-channel magnitudes; borders use one-sided differences.
    """
    arr = _as_chw(image)
    if arr.shape[0] not in (1, 3):
        raise ValueError("gradient_magnitude expects 1 or 3 channels")
    mags = []
    for plane in arr:
        gy, gx = _axis_gradients(plane)
        mags.append(np.hypot(gx, gy))
    out = np.max(np.stack(mags), axis=0) if len(mags) > 1 else mags[0]
    return ChannelMap(out[None].astype(np.float32), "regression", name="gradmag")


def _cell_means(plane: np.ndarray, cell: int) -> np.ndarray:
    """Mean over cell x cell blocks, broadcast back to the full grid.

    Border cells may be smaller when the image size is not a multiple of
    the cell size.
    """
    if cell <= 1:
        return plane
    h, w = plane.shape
    row_ids = np.arange(h) // cell
    col_ids = np.arange(w) // cell
    nrows = row_ids[-1] + 1
    ncols = col_ids[-1] + 1
    flat_ids = row_ids[:, None] * ncols + col_ids[None, :]
    sums = np.bincount(flat_ids.ravel(), weights=plane.ravel(), minlength=nrows * ncols)
    counts = np.bincount(flat_ids.ravel(), minlength=nrows * ncols)
    means = sums / counts
    return means[flat_ids]


def hog_channels(
    image: np.ndarray, bin_count: int = HOG_BIN_COUNT, cell_size: int = HOG_CELL_SIZE
) -> ChannelMap:
    """Per-pixel oriented-gradient histogram channels (bin_count x H x W).

    The gradient magnitude is soft-assigned by linear interpolation to
    unsigned-orientation bins with centers k*pi/bin_count over [0, pi),
    then box-averaged over cell_size x cell_size cells (output stays at
    full spatial size with cell-constant values). Use cell_size=1 to skip
    aggregation. For 3-channel input the gradient of the strongest channel
    at each pixel is used, matching gradient_magnitude's maximum rule.
    """
    if bin_count < 2:
        raise ValueError("bin_count must be >= 2")
    arr = _as_chw(image)
    gys, gxs = [], []
    for plane in arr:
        gy, gx = _axis_gradients(plane)
        gys.append(gy)
        gxs.append(gx)
    gys_a = np.stack(gys)
    gxs_a = np.stack(gxs)
    mags = np.hypot(gxs_a, gys_a)
    best = np.argmax(mags, axis=0)
    take = lambda a: np.take_along_axis(a, best[None], axis=0)[0]
    mag = take(mags)
    gx = take(gxs_a)
    gy = take(gys_a)

    theta = np.mod(np.arctan2(gy, gx), math.pi)  # unsigned orientation in [0, pi)
    pos = theta * bin_count / math.pi
    k0 = np.floor(pos).astype(np.int64) % bin_count
    k1 = (k0 + 1) % bin_count
    w1 = pos - np.floor(pos)

    h, w = mag.shape
    hist = np.zeros((bin_count, h, w))
    flat = np.arange(h * w)
    hist.reshape(bin_count, -1)[k0.ravel(), flat] += (mag * (1.0 - w1)).ravel()
    hist.reshape(bin_count, -1)[k1.ravel(), flat] += (mag * w1).ravel()

    out = np.stack([_cell_means(hist[b], cell_size) for b in range(bin_count)])
    return ChannelMap(out.astype(np.float32), "regression", name="hog")


def standardize(data: np.ndarray, floor: float = STD_FLOOR) -> np.ndarray:
    """Per-channel zero-mean / unit-variance over the image, sigma floored."""
    arr = np.asarray(data, dtype=np.float64)
    mean = arr.mean(axis=(-2, -1), keepdims=True)
    std = arr.std(axis=(-2, -1), keepdims=True)
    return ((arr - mean) / np.maximum(std, floor)).astype(np.float32)


def compute_icf(image: np.ndarray) -> ChannelMap:
    """The 10-channel stack: 3 LUV + 1 gradient magnitude + 6 HOG channels,
    each standardized to zero mean / unit variance over the image."""
    arr = _as_chw(image)
    if arr.shape[0] != 3:
        raise ValueError("compute_icf expects a 3-channel image")
    luv = standardize(rgb_to_luv(arr).data)
    gm = standardize(gradient_magnitude(arr).data)
    hog = standardize(hog_channels(arr, HOG_BIN_COUNT).data)
    return ChannelMap(np.concatenate([luv, gm, hog]), "regression", name="icf")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def blur_heatmap(segmentation: ChannelMap | np.ndarray, sigma: float) -> ChannelMap:
    """Gaussian blur of a person-probability plane into the heatmap channel.

    Separable convolution with a normalized kernel of radius ceil(3*sigma)
    and reflect padding, so constants are preserved exactly and the output
    stays within the input's value range.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    data = segmentation.data if isinstance(segmentation, ChannelMap) else np.asarray(segmentation)
    plane = np.asarray(data, dtype=np.float64)
    if plane.ndim == 3:
        if plane.shape[0] != 1:
            raise ValueError("blur_heatmap expects a single-plane probability map")
        plane = plane[0]
    if plane.min() < 0.0 or plane.max() > 1.0:
        raise ValueError("heatmap input must be a probability map in [0, 1]")
    kernel = _gaussian_kernel(sigma)
    radius = len(kernel) // 2
    padded = np.pad(plane, radius, mode="symmetric")
    tmp = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, tmp)
    out = np.clip(out, 0.0, 1.0)
    return ChannelMap(out[None].astype(np.float32), "binary", name="heatmap")


def default_heatmap_sigma(image_height: int) -> float:
    """Heatmap blur width: 4 px at height 128, scaling linearly."""
    return 4.0 * image_height / 128.0


def channel_to_network_input(cm: ChannelMap) -> np.ndarray:
    """Turn a channel map into standardized float planes for network input.

    Integer-coded multiclass maps are one-hot expanded first; every plane
    is then standardized per image, uniformly across channel kinds.
    """
    data = cm.data
    if cm.kind == "multiclass" and cm.channels == 1:
        codes = data[0].astype(np.int64)
        planes = np.stack([(codes == k).astype(np.float64) for k in range(cm.class_count)])
        data = planes
    return standardize(data)
