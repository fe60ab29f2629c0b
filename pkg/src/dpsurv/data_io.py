"""File formats and the synthetic cohort generator.

Bulk patch matrices use the EMB1 binary layout: 4 magic bytes "EMB1", two
unsigned 32-bit little-endian integers (n_patches, dim), then row-major
IEEE-754 32-bit little-endian floats.  Manifests and models are JSON so
they stay human-inspectable; in-memory arithmetic is float64 throughout.

Readers are safe concurrently; writers need exclusive access per path.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evidence import ComponentPrototype, PrototypeBank
from .gmm import PatchPrototypes
from .training import SurvivalRecord, TrainConfig

__all__ = [
    "BadMagicError",
    "CohortManifest",
    "DimensionMismatchError",
    "EMB_MAGIC",
    "MODEL_VERSION",
    "ManifestEntry",
    "ManifestSchemaError",
    "ModelFormatError",
    "SynthSpec",
    "TruncatedPayloadError",
    "generate_synthetic",
    "load_model",
    "load_patches",
    "read_embedding",
    "read_manifest",
    "save_model",
    "write_embedding",
    "write_manifest",
]

EMB_MAGIC = b"EMB1"
MODEL_VERSION = "dpsurv-model-v1"


class BadMagicError(ValueError):
    """Embedding file does not start with the EMB1 magic bytes."""


class TruncatedPayloadError(ValueError):
    """Embedding file size does not match its header."""


class DimensionMismatchError(ValueError):
    """Embedding dimension disagrees with the manifest."""


class ManifestSchemaError(ValueError):
    """Manifest JSON violates the schema; the message names the field."""


class ModelFormatError(ValueError):
    """Model JSON has the wrong version or is missing fields."""


def write_embedding(path: str | Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError("embedding matrix must be nonempty and 2-D")
    payload = m.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(payload)


def read_embedding(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != EMB_MAGIC:
        if len(data) >= 4:
            raise BadMagicError(f"{path}: expected EMB1 magic, got {data[:4]!r}")
        raise TruncatedPayloadError(f"{path}: file shorter than the magic bytes")
    if len(data) < 12:
        raise TruncatedPayloadError(f"{path}: header truncated")
    n, d = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n * d
    if len(data) != expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} bytes for {n}x{d}, got {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=12)
    return values.reshape(n, d).astype(np.float64)


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    embedding_path: str
    time: float
    censored: bool

    def record(self) -> SurvivalRecord:
        return SurvivalRecord(
            subject_id=self.subject_id, time=self.time, censored=self.censored
        )


@dataclass(frozen=True)
class CohortManifest:
    entries: tuple[ManifestEntry, ...]
    dim: int
    root: Path

    def records(self) -> list[SurvivalRecord]:
        return [e.record() for e in self.entries]


def _require(container: dict, key: str, where: str):
    if key not in container:
        raise ManifestSchemaError(f"{where}: missing field {key!r}")
    return container[key]


def read_manifest(path: str | Path) -> CohortManifest:
    """Parse and validate a cohort manifest; embedding paths resolve
    relative to the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ManifestSchemaError("$: manifest must be a JSON object")
    dim = _require(doc, "dim", "$")
    if not isinstance(dim, int) or dim < 1:
        raise ManifestSchemaError("$.dim: must be a positive integer")
    subjects = _require(doc, "subjects", "$")
    if not isinstance(subjects, list) or not subjects:
        raise ManifestSchemaError("$.subjects: must be a nonempty list")
    entries = []
    seen: set[str] = set()
    for i, item in enumerate(subjects):
        where = f"$.subjects[{i}]"
        if not isinstance(item, dict):
            raise ManifestSchemaError(f"{where}: must be an object")
        sid = _require(item, "subject_id", where)
        if not isinstance(sid, str) or not sid:
            raise ManifestSchemaError(f"{where}.subject_id: must be a nonempty string")
        if sid in seen:
            raise ManifestSchemaError(f"{where}.subject_id: duplicate id {sid!r}")
        seen.add(sid)
        emb = _require(item, "embedding_path", where)
        if not isinstance(emb, str) or not emb:
            raise ManifestSchemaError(f"{where}.embedding_path: must be a string")
        t = _require(item, "time", where)
        if not isinstance(t, (int, float)) or not math.isfinite(t) or t <= 0:
            raise ManifestSchemaError(f"{where}.time: must be a positive number")
        cens = _require(item, "censored", where)
        if not isinstance(cens, bool):
            raise ManifestSchemaError(f"{where}.censored: must be a boolean")
        entries.append(
            ManifestEntry(
                subject_id=sid, embedding_path=emb, time=float(t), censored=cens
            )
        )
    return CohortManifest(entries=tuple(entries), dim=dim, root=path.parent)


def write_manifest(path: str | Path, manifest: CohortManifest) -> None:
    doc = {
        "dim": manifest.dim,
        "subjects": [
            {
                "subject_id": e.subject_id,
                "embedding_path": e.embedding_path,
                "time": e.time,
                "censored": e.censored,
            }
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_patches(manifest: CohortManifest, entry: ManifestEntry) -> np.ndarray:
    """Read one subject's patch matrix, checking it against the manifest
    dimension."""
    patches = read_embedding(manifest.root / entry.embedding_path)
    if patches.shape[1] != manifest.dim:
        raise DimensionMismatchError(
            f"{entry.subject_id}: embedding dim {patches.shape[1]} != manifest "
            f"dim {manifest.dim}"
        )
    return patches


def _prototype_to_json(p: ComponentPrototype) -> dict:
    return {
        "anchor": p.anchor.tolist(),
        "coeffs": p.coeffs.tolist(),
        "intercept": p.intercept,
        "log_var": p.log_var,
        "raw_h": p.raw_h,
        "gamma": p.gamma,
    }


def save_model(
    path: str | Path,
    bank: PrototypeBank,
    patch_protos: PatchPrototypes,
    cfg: TrainConfig,
) -> None:
    """Versioned JSON model file; floats round-trip exactly through the
    JSON encoding."""
    cfg_doc = asdict(cfg)
    if isinstance(cfg_doc["n_prototypes"], tuple):
        cfg_doc["n_prototypes"] = list(cfg_doc["n_prototypes"])
    doc = {
        "version": MODEL_VERSION,
        "lambda_mix": bank.lambda_mix,
        "flatten_order": ["weight", "mean", "variance"],
        "components": [
            [_prototype_to_json(p) for p in protos] for protos in bank.components
        ],
        "patch_prototypes": patch_protos.means.tolist(),
        "config": cfg_doc,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path: str | Path) -> tuple[PrototypeBank, PatchPrototypes, TrainConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    version = doc.get("version")
    if version != MODEL_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model version {version!r} (expected {MODEL_VERSION})"
        )
    for key in ("lambda_mix", "components", "patch_prototypes", "config"):
        if key not in doc:
            raise ModelFormatError(f"{path}: missing field {key!r}")
    try:
        components = [
            [
                ComponentPrototype(
                    anchor=np.array(p["anchor"], dtype=np.float64),
                    coeffs=np.array(p["coeffs"], dtype=np.float64),
                    intercept=float(p["intercept"]),
                    log_var=float(p["log_var"]),
                    raw_h=float(p["raw_h"]),
                    gamma=float(p["gamma"]),
                )
                for p in protos
            ]
            for protos in doc["components"]
        ]
        bank = PrototypeBank(components, lambda_mix=float(doc["lambda_mix"]))
        protos = PatchPrototypes(
            means=np.array(doc["patch_prototypes"], dtype=np.float64)
        )
        cfg_doc = dict(doc["config"])
        if isinstance(cfg_doc.get("n_prototypes"), list):
            cfg_doc["n_prototypes"] = tuple(cfg_doc["n_prototypes"])
        cfg = TrainConfig(**cfg_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: invalid model contents ({exc})") from exc
    return bank, protos, cfg


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic cohort with known ground truth: patches drawn from
    per-component Gaussians under Dirichlet occupancies, log survival time a
    linear function of occupancy plus noise, independent uniform censoring
    calibrated to the requested rate."""

    n_subjects: int
    dim: int
    n_components: int
    patches_per_slide: tuple[int, int]
    risk_coeffs: tuple[float, ...]
    noise_sd: float
    censor_rate: float
    seed: int
    component_means: np.ndarray | str = "random"

    def __post_init__(self) -> None:
        lo, hi = self.patches_per_slide
        if self.n_subjects < 1 or self.dim < 1 or self.n_components < 1:
            raise ValueError("sizes must be positive")
        if not 1 <= lo <= hi:
            raise ValueError("invalid patches_per_slide range")
        if len(self.risk_coeffs) != self.n_components:
            raise ValueError("risk_coeffs length must match n_components")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValueError("censor_rate must lie in [0, 1)")
        if self.noise_sd < 0.0:
            raise ValueError("noise_sd must be nonnegative")
        if not isinstance(self.component_means, str):
            m = np.asarray(self.component_means, dtype=np.float64)
            if m.shape != (self.n_components, self.dim):
                raise ValueError("component_means must be (n_components, dim)")
            object.__setattr__(self, "component_means", m)


# Within-component patch scatter (unit) and the spread of random component
# centers; keeps random cohorts well separated at typical dimensions.
PATCH_SD = 1.0
CENTER_SD = 2.0


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> tuple[CohortManifest, dict]:
    """Write a full synthetic cohort (EMB1 files, manifest.json,
    ground_truth.json) into out_dir; bit-identical for a given seed."""
    out_dir = Path(out_dir)
    (out_dir / "emb").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, 0])
    if isinstance(spec.component_means, str):
        centers = rng.normal(0.0, CENTER_SD, size=(spec.n_components, spec.dim))
    else:
        centers = spec.component_means
    risk = np.asarray(spec.risk_coeffs, dtype=np.float64)

    width = max(4, len(str(spec.n_subjects - 1)))
    ids = [f"s{i:0{width}d}" for i in range(spec.n_subjects)]
    occupancies = np.empty((spec.n_subjects, spec.n_components))
    true_log_t = np.empty(spec.n_subjects)
    lo, hi = spec.patches_per_slide
    for i, sid in enumerate(ids):
        occ = rng.dirichlet(np.ones(spec.n_components))
        n_patches = int(rng.integers(lo, hi + 1))
        comp = rng.choice(spec.n_components, size=n_patches, p=occ)
        patches = centers[comp] + PATCH_SD * rng.standard_normal(
            (n_patches, spec.dim)
        )
        write_embedding(out_dir / "emb" / f"{sid}.emb", patches)
        occupancies[i] = occ
        true_log_t[i] = float(risk @ occ) + (
            rng.normal(0.0, spec.noise_sd) if spec.noise_sd > 0 else 0.0
        )

    true_t = np.exp(true_log_t)
    censor_draws = rng.uniform(0.0, true_t.max(), size=spec.n_subjects)
    candidates = np.flatnonzero(censor_draws < true_t)
    target = int(round(spec.censor_rate * spec.n_subjects))
    order = rng.permutation(candidates.size)
    chosen = set(candidates[order[:target]].tolist())

    entries = []
    sidecar = {"seed": spec.seed, "subjects": {}}
    for i, sid in enumerate(ids):
        censored = i in chosen
        observed = float(censor_draws[i]) if censored else float(true_t[i])
        entries.append(
            ManifestEntry(
                subject_id=sid,
                embedding_path=f"emb/{sid}.emb",
                time=observed,
                censored=censored,
            )
        )
        sidecar["subjects"][sid] = {
            "occupancy": occupancies[i].tolist(),
            "true_log_time": float(true_log_t[i]),
            "true_time": float(true_t[i]),
            "censored": censored,
            "observed_time": observed,
        }
    manifest = CohortManifest(entries=tuple(entries), dim=spec.dim, root=out_dir)
    write_manifest(out_dir / "manifest.json", manifest)
    (out_dir / "ground_truth.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return manifest, sidecar
