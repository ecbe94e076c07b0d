"""Cohort files, preprocessing, synthetic cohorts, imputation and folds.

On-disk layout (all paths in a manifest are relative to the manifest):

* volumes: raw little-endian float32, C order, with a JSON sidecar next to
  it (same stem, ``.json``) holding ``{"shape": [d, h, w], "spacing_mm": [a, b, c]}``
* expression: two-column TSV with header ``gene_id<TAB>value``
* manifest: JSON with ``patients`` and ``preprocessing`` blocks
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .encoders import ProjectedTriplet
from .optim import Adam
from .survival import SurvivalLabel
from .tensor import Tensor

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["patients", "preprocessing"],
    "properties": {
        "patients": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "time_days", "event"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "ct_path": {"type": "string"},
                    "pet_path": {"type": "string"},
                    "rna_path": {"type": "string"},
                    "time_days": {"type": "number"},
                    "event": {"type": "integer", "enum": [0, 1]},
                    "latent_risk": {"type": "number"},
                },
            },
        },
        "preprocessing": {
            "type": "object",
            "required": ["shape", "normalization"],
            "properties": {
                "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                "normalization": {"type": "string", "enum": ["zscore", "none"]},
            },
        },
    },
}


class CohortError(ValueError):
    pass


# file formats ----------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_volume(path, volume, spacing_mm=(1.0, 1.0, 1.0)):
    path = Path(path)
    vol = np.ascontiguousarray(volume, dtype="<f4")
    path.write_bytes(vol.tobytes(order="C"))
    meta = {"shape": list(vol.shape), "spacing_mm": [float(s) for s in spacing_mm]}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_volume_meta(path) -> dict:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError:
        raise CohortError(f"missing sidecar for {path}") from None
    shape = meta.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape)):
        raise CohortError(f"bad shape in sidecar of {path}: {shape!r}")
    return meta


def read_volume(path) -> np.ndarray:
    path = Path(path)
    shape = tuple(read_volume_meta(path)["shape"])
    raw = path.read_bytes()
    if len(raw) != 4 * int(np.prod(shape)):
        raise CohortError(f"{path}: {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_expression(path, values, gene_ids=None):
    values = np.asarray(values, dtype=np.float64)
    gene_ids = gene_ids or [f"G{i:05d}" for i in range(values.size)]
    lines = ["gene_id\tvalue"] + [f"{g}\t{v!r}" for g, v in zip(gene_ids, values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_expression(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["gene_id", "value"]:
        raise CohortError(f"{path}: expected header 'gene_id<TAB>value'")
    try:
        return np.array([float(line.split("\t")[1]) for line in lines[1:] if line], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise CohortError(f"{path}: malformed row ({exc})") from None


# preprocessing ---------------------------------------------------------------


def _resample_axis(x, n_out, axis):
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    # pixel-centre alignment
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    shape = [1] * x.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - w) + np.take(x, hi, axis=axis) * w


def resample_volume(volume, target_shape) -> np.ndarray:
    """Separable trilinear resampling to ``target_shape``."""
    x = np.asarray(volume, dtype=np.float64)
    for axis, n in enumerate(target_shape):
        x = _resample_axis(x, int(n), axis)
    return x


def preprocess_volume(raw, target_shape, normalization: str = "zscore") -> tuple[np.ndarray, bool]:
    """Resample then z-score one volume.

    Returns ``(volume, degenerate)``; a zero-variance volume comes back as
    all zeros with ``degenerate`` set.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0 or raw.ndim != 3:
        raise CohortError("preprocessing needs a nonempty 3-D volume")
    vol = resample_volume(raw, target_shape)
    if normalization == "none":
        return vol, False
    if normalization != "zscore":
        raise ValueError(f"unknown normalization {normalization!r}")
    std = vol.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(vol), True
    return (vol - vol.mean()) / std, False


# cohort ----------------------------------------------------------------------


@dataclass
class PatientRecord:
    id: str
    label: SurvivalLabel
    ct_path: Path | None = None
    pet_path: Path | None = None
    rna_path: Path | None = None
    latent_risk: float | None = None

    def present(self) -> tuple[bool, bool, bool]:
        return self.ct_path is not None, self.pet_path is not None, self.rna_path is not None

    def load_ct(self):
        return None if self.ct_path is None else read_volume(self.ct_path)

    def load_pet(self):
        return None if self.pet_path is None else read_volume(self.pet_path)

    def load_rna(self):
        return None if self.rna_path is None else read_expression(self.rna_path)


@dataclass
class CohortManifest:
    path: Path
    records: list[PatientRecord]
    target_shape: tuple[int, int, int]
    normalization: str
    gene_count: int | None

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def times(self) -> np.ndarray:
        return np.array([r.label.time for r in self.records])

    def events(self) -> np.ndarray:
        return np.array([r.label.event for r in self.records], dtype=np.int64)

    def latent_risk(self) -> np.ndarray | None:
        vals = [r.latent_risk for r in self.records]
        return None if any(v is None for v in vals) else np.array(vals)

    def load_arrays(self, dtype=np.float32) -> "CohortArrays":
        """Read and preprocess every record into stacked arrays.

        Missing modalities are left as zeros and marked in ``present``.
        """
        n = self.n
        shape = self.target_shape
        ct = np.zeros((n, *shape), dtype)
        pet = np.zeros((n, *shape), dtype)
        rna = np.zeros((n, self.gene_count or 0), dtype)
        present = np.zeros((n, 3), bool)
        degenerate = []
        for i, rec in enumerate(self.records):
            for j, (loader, out) in enumerate(((rec.load_ct, ct), (rec.load_pet, pet))):
                raw = loader()
                if raw is None:
                    continue
                vol, flag = preprocess_volume(raw, shape, self.normalization)
                if flag:
                    degenerate.append((rec.id, ("ct", "pet")[j]))
                out[i] = vol
                present[i, j] = True
            expr = rec.load_rna()
            if expr is not None:
                rna[i] = expr
                present[i, 2] = True
        if degenerate:
            log.warning("zero-variance volumes normalized to zeros: %s", degenerate)
        return CohortArrays(self.ids, ct, pet, rna, present, self.times(), self.events())


@dataclass
class CohortArrays:
    ids: list[str]
    ct: np.ndarray
    pet: np.ndarray
    rna: np.ndarray
    present: np.ndarray
    time: np.ndarray
    event: np.ndarray

    def complete(self) -> np.ndarray:
        return self.present.all(axis=1)


def load_cohort(manifest_path) -> CohortManifest:
    """Parse and validate a manifest plus the files it references."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise CohortError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise CohortError(f"manifest is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CohortError(f"manifest schema violation: {exc.message}") from None

    root = manifest_path.parent
    target_shape = tuple(doc["preprocessing"]["shape"])
    records = []
    seen = set()
    gene_count = None
    for entry in doc["patients"]:
        pid = entry["id"]
        if pid in seen:
            raise CohortError(f"duplicate patient id {pid!r}")
        seen.add(pid)
        try:
            label = SurvivalLabel(float(entry["time_days"]), int(entry["event"]))
        except ValueError as exc:
            raise CohortError(f"patient {pid!r}: {exc}") from None
        paths = {}
        for key in ("ct_path", "pet_path", "rna_path"):
            if key in entry:
                p = root / entry[key]
                if not p.is_file():
                    raise CohortError(f"patient {pid!r}: missing file {p}")
                paths[key] = p
        if len(paths) < 2:
            raise CohortError(f"patient {pid!r} has {len(paths)} modality; at least two are required")
        for key in ("ct_path", "pet_path"):
            if key in paths:
                meta = read_volume_meta(paths[key])
                expected = 4 * int(np.prod(meta["shape"]))
                if paths[key].stat().st_size != expected:
                    raise CohortError(f"patient {pid!r}: {paths[key].name} size does not match its sidecar")
        if "rna_path" in paths:
            count = read_expression(paths["rna_path"]).size
            if gene_count is None:
                gene_count = count
            elif count != gene_count:
                raise CohortError(f"patient {pid!r}: {count} genes, cohort has {gene_count}")
        records.append(PatientRecord(pid, label, latent_risk=entry.get("latent_risk"), **paths))
    return CohortManifest(manifest_path, records, target_shape, doc["preprocessing"]["normalization"], gene_count)


# synthetic cohorts -----------------------------------------------------------


@dataclass
class SynthConfig:
    n: int = 200
    latent_dim: int = 2
    effect_size: float = 2.0
    censor_rate: float = 0.2
    seed: int = 0
    shape: tuple[int, int, int] = (16, 64, 64)
    gene_count: int = 256
    latent_scale: float = 1.5
    baseline_hazard: float = 1e-3
    # standard deviation of the modality-specific perturbation of the risk signal
    signal_noise: tuple[float, float, float] = (0.5, 0.5, 0.25)
    voxel_noise: float = 0.5
    gene_noise: float = 0.5

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.signal_noise = tuple(float(s) for s in self.signal_noise)
        if self.n < 8:
            raise ValueError(f"synthetic cohorts need n >= 8, got {self.n}")
        if not 0 <= self.censor_rate < 1:
            raise ValueError(f"censor_rate must be in [0, 1), got {self.censor_rate}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.gene_count < 10:
            raise ValueError("gene_count must be at least 10")


def _blob(grid, center, width):
    d2 = sum(((g - c) / w) ** 2 for g, c, w in zip(grid, center, width))
    return np.exp(-0.5 * d2)


def _volume_patterns(cfg: SynthConfig, modality: int):
    """Fixed spatial patterns for one imaging modality.

    Returns (reference blob, one blob per latent factor, nuisance blob).
    """
    rng = np.random.default_rng([cfg.seed, 101, modality])
    grid = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in cfg.shape), indexing="ij")
    dims = np.array(cfg.shape, dtype=np.float64)
    width = dims / 6.0

    def center():
        return rng.uniform(0.2, 0.8, 3) * (dims - 1)

    reference = _blob(grid, center(), width)
    factors = [_blob(grid, center(), width) for _ in range(cfg.latent_dim)]
    nuisance = _blob(grid, center(), width)
    return reference, factors, nuisance


def synthesize_cohort(out_dir, cfg: SynthConfig | None = None) -> Path:
    """Write a synthetic cohort whose modalities all reflect a latent risk.

    Per patient, latent factors ``z ~ N(0, I)`` are drawn; the risk is
    ``u = latent_scale * z[0]``. Survival time is exponential with hazard
    ``baseline_hazard * exp(effect_size * u)`` and a random ``censor_rate``
    fraction is censored at a uniform fraction of the true time.

    CT and PET carry ``u`` (plus modality-specific perturbation) as the
    amplitude of a fixed blob next to a constant reference blob; the other
    factors drive further blobs, and a nuisance blob with an independent
    random amplitude is added per modality. Expression carries ``u`` as the
    scale of a fixed signature over 10% of genes. ``u`` is stored in the
    manifest for oracle evaluation.
    """
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 7])

    z = rng.standard_normal((cfg.n, cfg.latent_dim))
    u = cfg.latent_scale * z[:, 0]
    true_time = rng.exponential(1.0, cfg.n) / (cfg.baseline_hazard * np.exp(cfg.effect_size * u))
    censored = rng.random(cfg.n) < cfg.censor_rate
    frac = rng.uniform(0.05, 1.0, cfg.n)
    time = np.where(censored, true_time * frac, true_time)
    time = np.maximum(time, 1e-6)

    modality_noise = rng.standard_normal((cfg.n, 3))
    nuisance = rng.standard_normal((cfg.n, 2))

    g = cfg.gene_count
    sig_rng = np.random.default_rng([cfg.seed, 202])
    n_sig = max(1, g // 10)
    risk_genes = sig_rng.choice(g, n_sig, replace=False)
    signature = np.zeros(g)
    signature[risk_genes] = sig_rng.choice([-1.0, 1.0], n_sig)
    factor_signatures = []
    for _ in range(1, cfg.latent_dim):
        s = np.zeros(g)
        genes = sig_rng.choice(g, n_sig, replace=False)
        s[genes] = sig_rng.choice([-1.0, 1.0], n_sig)
        factor_signatures.append(s)

    patterns = [_volume_patterns(cfg, m) for m in (0, 1)]
    patients = []
    for i in range(cfg.n):
        pid = f"P{i:04d}"
        entry = {"id": pid, "time_days": float(time[i]), "event": int(not censored[i]), "latent_risk": float(u[i])}
        for m, name in enumerate(("ct", "pet")):
            reference, factors, nuis = patterns[m]
            signal = z[i, 0] + cfg.signal_noise[m] * modality_noise[i, m]
            vol = 2.0 * reference + signal * factors[0] + 1.5 * nuisance[i, m] * nuis
            for f in range(1, cfg.latent_dim):
                vol = vol + z[i, f] * factors[f]
            vol = vol + cfg.voxel_noise * rng.standard_normal(cfg.shape)
            fname = f"{pid}_{name}.raw"
            write_volume(out / fname, vol)
            entry[f"{name}_path"] = fname
        signal = z[i, 0] + cfg.signal_noise[2] * modality_noise[i, 2]
        expr = cfg.gene_noise * rng.standard_normal(g) + signal * signature
        for f, s in enumerate(factor_signatures, start=1):
            expr = expr + z[i, f] * s
        fname = f"{pid}_rna.tsv"
        write_expression(out / fname, expr)
        entry["rna_path"] = fname
        patients.append(entry)

    manifest = {
        "patients": patients,
        "preprocessing": {"shape": list(cfg.shape), "normalization": "zscore"},
        "synthesis": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.__dict__.items()},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# imputation ------------------------------------------------------------------

IMPUTATION_STRATEGIES = ("average", "zero", "predicted")


class ImputationRegressor:
    """One-hidden-layer net predicting one modality from the other two.

    ``2*dim -> hidden -> dim`` with tanh, trained by squared error; outputs
    are re-normalized to unit length.
    """

    def __init__(self, dim: int, hidden: int | None = None, seed: int = 0):
        hidden = hidden or dim
        rng = np.random.default_rng([seed, 31])
        b1, b2 = 1 / np.sqrt(2 * dim), 1 / np.sqrt(hidden)
        self.params = {
            "w1": Tensor(rng.uniform(-b1, b1, (2 * dim, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.uniform(-b2, b2, (hidden, dim)), requires_grad=True),
            "b2": Tensor(np.zeros(dim), requires_grad=True),
        }

    def _forward(self, x):
        p = self.params
        return ((x @ p["w1"] + p["b1"]).tanh()) @ p["w2"] + p["b2"]

    def fit(self, inputs, targets, epochs: int = 300, lr: float = 1e-2):
        x = Tensor(np.asarray(inputs, dtype=np.float64))
        y = np.asarray(targets, dtype=np.float64)
        opt = Adam(self.params, lr=lr)
        for _ in range(epochs):
            opt.zero_grad()
            diff = self._forward(x) - y
            (diff * diff).mean().backward()
            opt.step()
        return self

    def predict(self, inputs) -> np.ndarray:
        out = self._forward(Tensor(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))).data
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def impute_missing_modality(t_tilde, p_tilde, r_tilde, strategy: str = "average", regressor: ImputationRegressor | None = None) -> ProjectedTriplet:
    """Fill the single missing (``None``) embedding of a triplet.

    ``average`` takes the re-normalized mean of the two present embeddings,
    ``zero`` inserts a zero vector (sets ``flags["zero_imputed"]``), and
    ``predicted`` uses a fitted :class:`ImputationRegressor` fed with the
    present pair in CT, PET, RNA order.
    """
    parts = [t_tilde, p_tilde, r_tilde]
    missing = [i for i, x in enumerate(parts) if x is None]
    if len(missing) != 1:
        raise ValueError(f"exactly one modality must be missing, got {len(missing)}")
    if strategy not in IMPUTATION_STRATEGIES:
        raise ValueError(f"unknown imputation strategy {strategy!r}")
    k = missing[0]
    present = [np.asarray(x, dtype=np.float64) for x in parts if x is not None]
    flags = {"imputed": k, "zero_imputed": False}
    if strategy == "average":
        mean = 0.5 * (present[0] + present[1])
        norm = np.linalg.norm(mean)
        fill = mean / norm if norm > 0 else present[0]
    elif strategy == "zero":
        fill = np.zeros_like(present[0])
        flags["zero_imputed"] = True
    else:
        if regressor is None:
            raise ValueError("the 'predicted' strategy needs a fitted regressor")
        fill = regressor.predict(np.concatenate(present))[0]
    parts[k] = fill
    return ProjectedTriplet(*parts, flags=flags)


# folds -----------------------------------------------------------------------


@dataclass
class FoldSplit:
    ids: list[str]
    fold_of: np.ndarray
    fold_count: int
    seed: int = 0
    sizes: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.sizes = np.bincount(self.fold_of, minlength=self.fold_count).tolist()

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def make_folds(ids, fold_count: int = 4, seed: int = 0) -> FoldSplit:
    """Seeded shuffle followed by round-robin fold assignment."""
    if isinstance(ids, CohortManifest):
        ids = ids.ids
    ids = list(ids)
    if fold_count < 1 or fold_count > len(ids):
        raise ValueError(f"cannot make {fold_count} folds from {len(ids)} patients")
    perm = np.random.default_rng([seed, 41]).permutation(len(ids))
    fold_of = np.empty(len(ids), dtype=np.int64)
    fold_of[perm] = np.arange(len(ids)) % fold_count
    return FoldSplit(ids, fold_of, fold_count, seed)
