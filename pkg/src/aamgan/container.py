"""Binary model container.

Layout (little-endian)::

    b"AAMG"  u32 version  u32 n_sections
    per section:  4-byte tag  u64 payload_length  payload  u32 crc32(payload)
    payload:      u32 n_arrays, then per array
                  u16 name_length  name(utf-8)  u32 ndim  u64 dims[ndim]  f64 data

Every value is stored as float64; integer and boolean fields are restored to
their native dtypes on load.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .exceptions import ChecksumError, ContainerFormatError, ContainerVersionError, TruncatedFileError
from .geometry import ReferenceFrame, Triangulation
from .models import AAM, AppearanceModel, PointDistributionModel

MAGIC = b"AAMG"
VERSION = 1

_INT_FIELDS = {"triangles", "pixel_index", "triangle_of", "vertex_index"}
_BOOL_FIELDS = {"mask"}


def _pack_arrays(arrays: dict) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() below is C-order; keeps 0-d scalars 0-d
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.what}: needed {n} bytes at offset {self.pos}, "
                                     f"only {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_arrays(payload: bytes, tag: str) -> dict:
    r = _Reader(payload, f"section {tag}")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in _INT_FIELDS:
            arr = arr.astype(np.intp)
        elif name in _BOOL_FIELDS:
            arr = arr.astype(bool)
        arrays[name] = arr
    if r.pos != len(payload):
        raise ContainerFormatError(f"section {tag}: {len(payload) - r.pos} trailing bytes")
    return arrays


def encode_sections(sections: list) -> bytes:
    """``sections`` is a list of ``(tag, {name: array})``."""
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for tag, arrays in sections:
        t = tag.encode("ascii")
        if len(t) != 4:
            raise ValueError("section tags are exactly 4 ASCII bytes")
        payload = _pack_arrays(arrays)
        out.append(t + struct.pack("<Q", len(payload)) + payload
                   + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return b"".join(out)


def decode_sections(data: bytes) -> dict:
    if len(data) < 4:
        raise TruncatedFileError(f"file has {len(data)} bytes, too short for the header")
    if data[:4] != MAGIC:
        raise ContainerFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data, "container")
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ContainerVersionError(f"container version {version}, this reader supports {VERSION}")
    sections = {}
    for _ in range(count):
        tag = r.take(4).decode("ascii", errors="replace")
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError(f"CRC mismatch in section {tag!r}")
        sections[tag] = _unpack_arrays(payload, tag)
    if r.pos != len(data):
        raise ContainerFormatError(f"{len(data) - r.pos} unexpected bytes after the last section")
    return sections


# models <-> sections ------------------------------------------------------------

def _model_sections(aam: AAM) -> list:
    pdm, am, fr = aam.pdm, aam.appearance, aam.frame
    return [
        ("PDM ", {"mean_shape": pdm.mean_shape, "basis": pdm.basis, "eigenvalues": pdm.eigenvalues,
                  "n_similarity": pdm.n_similarity, "total_variance": pdm.total_variance,
                  "truncated": float(pdm.truncated)}),
        ("APPM", {"mean_texture": am.mean_texture, "basis": am.basis, "eigenvalues": am.eigenvalues,
                  "normalize": float(am.normalize), "total_variance": am.total_variance,
                  "truncated": float(am.truncated)}),
        ("TRI ", {"triangles": aam.tri.triangles}),
        ("FRAM", {"width": fr.width, "height": fr.height, "mask": fr.mask,
                  "pixel_index": fr.pixel_index, "reference": fr.reference,
                  "triangle_of": fr.triangle_of, "vertex_index": fr.vertex_index,
                  "barycentric": fr.barycentric}),
        ("META", {k: float(v) for k, v in aam.meta.items() if np.isscalar(v)}),
    ]


def _prior_sections(prior) -> list:
    return [
        ("PRIO", {"kappa": prior.kappa, "beta": prior.beta, "sigma": prior.sigma,
                  "resolution": prior.resolution,
                  "trained": float(prior.generator.trained and prior.discriminator.trained)}),
        ("GNET", prior.generator.state_dict()),
        ("DNET", prior.discriminator.state_dict()),
    ]


def _build_model(sec: dict) -> AAM:
    for tag in ("PDM ", "APPM", "TRI ", "FRAM"):
        if tag not in sec:
            raise ContainerFormatError(f"missing section {tag!r}")
    p, a, f = sec["PDM "], sec["APPM"], sec["FRAM"]
    pdm = PointDistributionModel(p["mean_shape"], p["basis"], p["eigenvalues"],
                                 int(p["n_similarity"]), float(p["total_variance"]),
                                 bool(p["truncated"]))
    tri = Triangulation(sec["TRI "]["triangles"])
    frame = ReferenceFrame(int(f["width"]), int(f["height"]), f["mask"], f["pixel_index"],
                           f["reference"], f["triangle_of"], f["vertex_index"], f["barycentric"])
    am = AppearanceModel(a["mean_texture"], a["basis"], a["eigenvalues"], frame, tri,
                         bool(a["normalize"]), float(a["total_variance"]), bool(a["truncated"]))
    meta = {}
    for k, v in sec.get("META", {}).items():
        v = float(v)
        meta[k] = int(v) if v.is_integer() else v
    return AAM(pdm, am, meta)


def _build_prior(sec: dict):
    from .gan_fitting import GanPrior
    from .nets import Discriminator, Generator
    if "PRIO" not in sec:
        return None
    pr = sec["PRIO"]
    trained = bool(pr["trained"])
    R = int(pr["resolution"])
    G, D = Generator(R), Discriminator(R)
    G.load_state_dict(sec["GNET"], trained)
    D.load_state_dict(sec["DNET"], trained)
    return GanPrior(G, D, float(pr["kappa"]), float(pr["beta"]), float(pr["sigma"]))


def dumps(aam: AAM, prior=None) -> bytes:
    sections = _model_sections(aam)
    if prior is not None:
        sections += _prior_sections(prior)
    return encode_sections(sections)


def loads(data: bytes):
    """Returns ``(aam, prior_or_None)``."""
    sec = decode_sections(data)
    return _build_model(sec), _build_prior(sec)


def serialize_model(aam: AAM, path, prior=None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(aam, prior))


def deserialize_model(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
