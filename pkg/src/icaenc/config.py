"""Pipeline configuration: JSON in, validated blocks out.

Paths are resolved relative to the config file. Every validation failure
names the offending field.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .aroma import AromaThresholds
from .encoder import RidgeSpec
from .errors import ConfigError, IcaEncError
from .features import FeatureConfig
from .preprocess import PreprocessConfig

SPLITS = ("estimation", "train", "test")
DIRECTIONS = ("temporal", "spatial")


@dataclass
class RunEntry:
    id: str
    volume: Path
    confounds: Path = None
    words: Path = None
    embeddings: Path = None


@dataclass
class IcaBlock:
    k: int = 100
    seed: int = 0
    tol: float = 1e-4
    max_iter: int = 200


@dataclass
class StatsBlock:
    n_perm: int = 1000
    q: float = 0.05
    block_len: int = None
    seed: int = 0


@dataclass
class MatchingBlock:
    enabled: bool = True
    percentile: float = 99.0
    weighted: bool = False
    direction: str = "temporal"
    top_n: int = 5
    signed: bool = False
    predicted: bool = True


@dataclass
class FeatureAnalysisBlock:
    networks: list = field(default_factory=lambda: ["AUD", "LANG", "VIS"])
    features: list = field(default_factory=lambda: ["word_rate", "residual_surprisal"])


@dataclass
class PipelineConfig:
    root: Path
    runs: dict
    mask: Path = None
    atlas: Path = None
    csf_mask: Path = None
    edge_mask: Path = None
    preprocess_ica: PreprocessConfig = field(default_factory=PreprocessConfig.ica_path)
    preprocess_encoding: PreprocessConfig = field(default_factory=PreprocessConfig.encoding_path)
    test_trim_head: int = 50
    ica: IcaBlock = field(default_factory=IcaBlock)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    ridge: RidgeSpec = field(default_factory=RidgeSpec)
    stats: StatsBlock = field(default_factory=StatsBlock)
    matching: MatchingBlock = field(default_factory=MatchingBlock)
    aroma: AromaThresholds = field(default_factory=AromaThresholds)
    feature_analysis: FeatureAnalysisBlock = field(default_factory=FeatureAnalysisBlock)
    baselines: bool = True
    output_dir: Path = None
    jobs: int = 1
    raw: dict = field(default_factory=dict)

    def block(self, name):
        """Plain-dict view of one config block (used for cache keys)."""
        value = getattr(self, name)
        if hasattr(value, "__dataclass_fields__"):
            return _jsonable(asdict(value))
        return _jsonable(value)

    @property
    def digest(self):
        """sha256 of the configuration as written, minus settings that cannot change results."""
        kept = {k: v for k, v in self.raw.items() if k not in ("output_dir", "jobs")}
        return hashlib.sha256(json.dumps(_jsonable(kept), sort_keys=True).encode()).hexdigest()

    def encoding_for(self, split):
        if split == "test":
            cfg = asdict(self.preprocess_encoding)
            cfg["trim_head"] = self.test_trim_head
            return PreprocessConfig(**cfg)
        return self.preprocess_encoding


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def _block(cls, data, name):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {unknown}")
    try:
        return cls(**data)
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _path(root, value, field_name, must_exist=True):
    if value is None:
        return None
    p = Path(value)
    p = p if p.is_absolute() else root / p
    if must_exist and not p.exists():
        raise ConfigError(f"{field_name}: file not found: {p}")
    return p


def from_dict(data, root=".", validate_files=True):
    root = Path(root)
    data = dict(data)
    top_known = {"paths", "preprocess", "ica", "features", "ridge", "stats", "matching", "aroma",
                 "feature_analysis", "baselines", "output_dir", "jobs", "seed"}
    unknown = sorted(set(data) - top_known)
    if unknown:
        raise ConfigError(f"config: unknown top-level field(s) {unknown}")
    paths = dict(data.get("paths") or {})

    runs, seen = {}, {}
    for split in SPLITS:
        entries = paths.get(split) or []
        if not isinstance(entries, list):
            raise ConfigError(f"paths.{split}: must be a list of runs")
        runs[split] = []
        for i, entry in enumerate(entries):
            where = f"paths.{split}[{i}]"
            if "id" not in entry or "volume" not in entry:
                raise ConfigError(f"{where}: needs 'id' and 'volume'")
            rid = str(entry["id"])
            if rid in seen:
                raise ConfigError(f"{where}.id: run {rid!r} already used in split {seen[rid]!r}; splits must be disjoint")
            seen[rid] = split
            run = RunEntry(
                rid,
                _path(root, entry["volume"], f"{where}.volume", validate_files),
                _path(root, entry.get("confounds"), f"{where}.confounds", validate_files),
                _path(root, entry.get("words"), f"{where}.words", validate_files),
                _path(root, entry.get("embeddings"), f"{where}.embeddings", validate_files),
            )
            if split != "estimation" and run.words is None:
                raise ConfigError(f"{where}.words: encoding runs need a word table")
            runs[split].append(run)
    for split in SPLITS:
        if not runs[split]:
            raise ConfigError(f"paths.{split}: at least one run is required")

    pre = dict(data.get("preprocess") or {})
    unknown = sorted(set(pre) - {"ica", "encoding", "test_trim_head"})
    if unknown:
        raise ConfigError(f"preprocess: unknown field(s) {unknown}")
    ica_pre = _block(PreprocessConfig, {**PreprocessConfig.ica_path().to_dict(), **(pre.get("ica") or {})}, "preprocess.ica")
    enc_pre = _block(PreprocessConfig, {**PreprocessConfig.encoding_path().to_dict(), **(pre.get("encoding") or {})},
                     "preprocess.encoding")
    test_trim = int(pre.get("test_trim_head", 50))
    if test_trim < 0:
        raise ConfigError("preprocess.test_trim_head: must be >= 0")

    seed = data.get("seed")
    seeded = (lambda block: {"seed": seed, **(block or {})}) if seed is not None else (lambda block: block)
    ica = _block(IcaBlock, seeded(data.get("ica")), "ica")
    if ica.k < 2:
        raise ConfigError(f"ica.k: must be >= 2, got {ica.k}")
    if ica.tol <= 0 or ica.max_iter < 1:
        raise ConfigError("ica.tol/ica.max_iter: must be positive")
    features = _block(FeatureConfig, data.get("features"), "features")
    ridge = _block(RidgeSpec, data.get("ridge"), "ridge")
    stats = _block(StatsBlock, seeded(data.get("stats")), "stats")
    if stats.n_perm < 1:
        raise ConfigError(f"stats.n_perm: must be >= 1, got {stats.n_perm}")
    if not 0 < stats.q < 1:
        raise ConfigError(f"stats.q: must lie in (0, 1), got {stats.q}")
    matching = _block(MatchingBlock, data.get("matching"), "matching")
    if matching.direction not in DIRECTIONS:
        raise ConfigError(f"matching.direction: must be one of {DIRECTIONS}")
    if not 0 < matching.percentile < 100:
        raise ConfigError("matching.percentile: must lie in (0, 100)")
    aroma = _block(AromaThresholds, data.get("aroma"), "aroma")
    fa = _block(FeatureAnalysisBlock, data.get("feature_analysis"), "feature_analysis")

    atlas = _path(root, paths.get("atlas"), "paths.atlas", validate_files)
    if matching.enabled and atlas is None:
        raise ConfigError("paths.atlas: required when matching.enabled is true")
    if "embeddings" in features.tracks:
        for split in ("train", "test"):
            for i, run in enumerate(runs[split]):
                if run.embeddings is None:
                    raise ConfigError(f"paths.{split}[{i}].embeddings: required by features.tracks")

    jobs = int(data.get("jobs", 1))
    if jobs < 1:
        raise ConfigError("jobs: must be >= 1")
    out = data.get("output_dir") or "out"
    return PipelineConfig(
        root=root,
        runs=runs,
        mask=_path(root, paths.get("mask"), "paths.mask", validate_files),
        atlas=atlas,
        csf_mask=_path(root, paths.get("csf_mask"), "paths.csf_mask", validate_files),
        edge_mask=_path(root, paths.get("edge_mask"), "paths.edge_mask", validate_files),
        preprocess_ica=ica_pre,
        preprocess_encoding=enc_pre,
        test_trim_head=test_trim,
        ica=ica,
        features=features,
        ridge=ridge,
        stats=stats,
        matching=matching,
        aroma=aroma,
        feature_analysis=fa,
        baselines=bool(data.get("baselines", True)),
        output_dir=_path(root, out, "output_dir", must_exist=False),
        jobs=jobs,
        raw=data,
    )


def load_config(path, overrides=None, validate_files=True):
    """Read a JSON config and apply ``overrides`` (dotted keys, e.g. ``ica.seed``)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: {path} is not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    try:
        return from_dict(data, path.parent, validate_files)
    except IcaEncError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"config: {exc}") from exc
