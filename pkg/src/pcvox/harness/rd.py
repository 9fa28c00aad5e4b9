"""Rate-distortion sweeps: preprocess, code losslessly, decode, measure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .. import octcodec
from .. import surrogate as sur
from .. import voxnet as vox
from ..bitcodec import Bitstream
from ..errors import IntegrityError
from ..pcgeom import PointCloud, VoxelCloud, d1_psnr, d2_psnr, dequantize, estimate_normals, quantize
from .bdrate import RDCurve
from .train import scaled_depth

PLAIN = "quantize"
VOXNET = "voxnet"
NORMAL_K = 9

Codec = Union[str, sur.SurrogateModel]


@dataclass(frozen=True)
class RDPoint:
    cloud: str
    chain: str  # preprocessing + codec, e.g. "voxnet+octcodec"
    scale: float
    lam: float  # 0 for plain quantization
    points: int  # coded voxels
    bits: int  # whole bitstream, header included
    bpp: float  # per original input point
    d1_psnr: float
    d2_psnr: float


def codec_name(codec: Codec) -> str:
    return "octcodec" if isinstance(codec, str) else "surrogate"


def code_lossless(vc: VoxelCloud, codec: Codec, scale: float = 1.0) -> int:
    """Encode, serialize, parse and decode; returns the stream size in bits.

    Raises IntegrityError unless the decoded cloud equals ``vc`` exactly.
    """
    if isinstance(codec, str):
        if codec != "octcodec":
            raise ValueError(f"unknown codec {codec!r}")
        data = octcodec.encode(vc, scale).to_bytes()
        decoded = octcodec.decode(Bitstream.from_bytes(data))
    else:
        data = sur.lossless_encode(codec, vc, scale).to_bytes()
        decoded = sur.lossless_decode(codec, data)
    if decoded != vc:
        raise IntegrityError("lossless round trip changed the cloud")
    return 8 * len(data)


@dataclass
class Original:
    """A reference cloud with its normals estimated once."""

    name: str
    cloud: PointCloud
    depth: int
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.normals is None:
            self.normals = estimate_normals(self.cloud, NORMAL_K)[0]


def measure(orig: Original, vc: VoxelCloud, scale: float, chain: str, lam: float,
            codec: Codec) -> RDPoint:
    bits = code_lossless(vc, codec, scale)
    rec = dequantize(vc, scale)
    k = min(NORMAL_K, len(rec))
    rec_normals = estimate_normals(rec, k)[0] if k >= 3 else np.tile([0.0, 0.0, 1.0], (len(rec), 1))
    d1 = d1_psnr(orig.cloud, rec, depth=orig.depth).d1_psnr
    d2 = d2_psnr(orig.cloud, rec, orig.normals, rec_normals, depth=orig.depth)
    return RDPoint(orig.name, chain, float(scale), float(lam), len(vc), bits,
                   bits / len(orig.cloud), d1, d2)


def rd_sweep(originals: Sequence[Original], scales: Sequence[float],
             voxnets: Mapping[float, vox.VoxNetModel], codec: Codec = "octcodec",
             log: Callable[[str], None] = lambda _m: None) -> List[RDPoint]:
    """Plain quantization at every scale and every voxnet at every scale."""
    name = codec_name(codec)
    out = []
    for orig in originals:
        for s in scales:
            d = scaled_depth(orig.depth, s)
            out.append(measure(orig, quantize(orig.cloud, s, d), s, f"{PLAIN}+{name}", 0.0, codec))
            for lam in sorted(voxnets):
                vc = vox.voxelize_detailed(voxnets[lam], orig.cloud, s, d).cloud
                out.append(measure(orig, vc, s, f"{VOXNET}+{name}", lam, codec))
        log(f"rd {orig.name}: {sum(p.cloud == orig.name for p in out)} points")
    return sort_points(out)


def sort_points(points: Sequence[RDPoint]) -> List[RDPoint]:
    return sorted(points, key=lambda p: (p.cloud, p.chain, p.bpp, p.scale, p.lam))


def pareto(samples: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Samples not dominated by a cheaper-or-equal sample of at least the same quality."""
    best = -np.inf
    out = []
    for bpp, q in sorted(samples, key=lambda s: (s[0], -s[1])):
        if q > best:
            if out and out[-1][0] == bpp:
                continue
            out.append((bpp, q))
            best = q
    return out


def curve(points: Sequence[RDPoint], metric: str = "d1") -> Optional[RDCurve]:
    """The Pareto frontier of ``points`` as an RD curve, or None below four samples."""
    attr = {"d1": "d1_psnr", "d2": "d2_psnr"}[metric]
    front = pareto([(p.bpp, getattr(p, attr)) for p in points])
    return RDCurve(tuple(front)) if len(front) >= 4 else None


def curves(points: Sequence[RDPoint], metric: str = "d1") -> Dict[Tuple[str, str], Optional[RDCurve]]:
    groups: Dict[Tuple[str, str], List[RDPoint]] = {}
    for p in points:
        groups.setdefault((p.cloud, p.chain), []).append(p)
    return {key: curve(pts, metric) for key, pts in sorted(groups.items())}


__all__ = ["RDPoint", "Original", "PLAIN", "VOXNET", "code_lossless", "measure", "rd_sweep",
           "sort_points", "pareto", "curve", "curves", "codec_name"]
