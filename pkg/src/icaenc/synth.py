"""Synthetic data with planted spatial sources and known stimulus drivers.

The forward model is ``X = A S + noise``. Spatial sources are truncated
Gaussian blobs (plus one edge-face artifact map) on a small grid. Their time
courses are FIR-weighted copies of the same stimulus tracks the pipeline
builds from the emitted word tables, so every driven component has an exact
linear answer.

ICA cannot separate jointly Gaussian sources. The blob maps are sparse and
carry multiplicative Laplace voxel texture, which keeps every source
strongly super-Gaussian across voxels.

``source_scale`` sets the voxel-wise standard deviation of each planted map.
At the default, peak loadings are about the size of the noise, so most of a
voxel's variance is noise, as in real recordings. Per-voxel z-scoring then
rescales voxels almost uniformly instead of flattening every blob into an
indicator of its support.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dataio import (
    Atlas,
    Mask,
    VolumeGrid,
    VolumeSeries,
    WordTable,
    atomic_write_text,
    write_atlas,
    write_embeddings,
    write_mask,
    write_volume_series,
    write_vxt,
    write_word_table,
)
from .errors import ConfigError, GridMismatch, OverlapInfeasible
from .features import FeatureConfig, FeatureMatrix, build_tracks, fir_expand
from .matching import _corr_matrix
from .preprocess import ConfoundMatrix, write_confounds

DRIVERS = ("word_rate", "residual_surprisal", "embeddings")
HRF_WEIGHTS = (0.2, 0.6, 1.0, 0.6, 0.2)
MOTION_NAMES = ("trans_x", "trans_y", "trans_z", "rot_x", "rot_y", "rot_z")


@dataclass
class ComponentSpec:
    """One planted component.

    ``kind`` is ``blob`` (network-like map) or ``artifact`` (edge-face map
    with a spiky white time course). ``driver`` names the stimulus track
    feeding a blob; ``None`` leaves it undriven (AR(1) time course).
    ``weights`` are FIR weights over the delays, shape ``(n_delays,)`` for
    scalar tracks or ``(d_emb, n_delays)`` for embeddings; ``None`` draws
    them from the SynthSpec seed.
    """

    name: str
    kind: str = "blob"
    driver: str = None
    weights: list = None

    def __post_init__(self):
        if self.kind not in ("blob", "artifact"):
            raise ConfigError(f"component kind must be blob or artifact, got {self.kind!r}")
        if self.driver is not None and self.driver not in DRIVERS:
            raise ConfigError(f"unknown driver {self.driver!r}; choose from {DRIVERS}")
        if self.kind == "artifact" and self.driver is not None:
            raise ConfigError("artifact components cannot be stimulus-driven")


def default_components():
    return [
        ComponentSpec("AUD", driver="word_rate"),
        ComponentSpec("LANG", driver="residual_surprisal"),
        ComponentSpec("VIS"),
        ComponentSpec("SEM", driver="embeddings"),
        ComponentSpec("ART", kind="artifact"),
    ]


@dataclass
class SynthSpec:
    dims: tuple = (16, 16, 16)
    voxel_size: float = 2.0
    tr: float = 2.0
    components: list = field(default_factory=default_components)
    blob_radius: float = 3.0
    blob_sigma: float = 2.5
    texture: float = 0.3
    centers: list = None
    csf_radius: float = 2.0
    noise_sd: float = 0.1
    source_scale: float = 0.05
    innovation_sd: float = 0.0
    ar_coef: float = 0.65
    spike_rate: float = 0.02
    spike_amplitude: float = 4.0
    delays: tuple = (1, 2, 3, 4, 5)
    standardize_tracks: bool = True
    n_trs: int = 300
    test_n_trs: int = 800
    runs: dict = field(default_factory=lambda: {"estimation": 1, "train": 5, "test": 1})
    words_per_sec: float = 2.5
    d_emb: int = 4
    vocab_size: int = 400
    motion_step: float = 0.01
    weight_jitter: float = 0.0
    shuffle_components: bool = False
    seed: int = 0
    stimulus_seed: int = None
    source_seed: int = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.delays = tuple(int(d) for d in self.delays)
        self.components = [c if isinstance(c, ComponentSpec) else ComponentSpec(**c) for c in self.components]
        if len(self.components) < 1:
            raise ConfigError("k_true must be >= 1")
        if self.noise_sd < 0 or self.innovation_sd < 0:
            raise ConfigError("noise_sd and innovation_sd must be >= 0")
        if self.blob_radius <= 0 or self.blob_sigma <= 0:
            raise ConfigError("blob radius and sigma must be positive")
        for split in ("train", "test"):
            if self.runs.get(split, 0) < 1:
                raise ConfigError(f"runs[{split!r}] must be >= 1")
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise ConfigError(f"component names must be unique: {names}")

    @property
    def k_true(self):
        return len(self.components)

    @property
    def grid(self):
        return VolumeGrid(self.dims, (self.voxel_size,) * 3)

    def to_dict(self):
        out = asdict(self)
        out["components"] = [asdict(c) for c in self.components]
        return out


@dataclass
class RunData:
    run_id: str
    split: str
    series: VolumeSeries
    words: WordTable
    embeddings: np.ndarray
    confounds: ConfoundMatrix
    timecourses: np.ndarray     # (T, K) planted A for this run, stored order


@dataclass
class GroundTruth:
    sources: np.ndarray          # (K, V) in stored order
    names: list                  # stored order
    driven: list                 # stored indices of driven components
    artifacts: list              # stored indices of artifact components
    drivers: dict                # name -> driver
    weights: dict                # name -> FIR weights
    order: list                  # stored position -> planted index
    centers: dict                # name -> blob center (voxel coordinates)
    grid: VolumeGrid = None
    mask: Mask = None

    def to_dict(self):
        return {
            "names": self.names,
            "driven": self.driven,
            "artifacts": self.artifacts,
            "drivers": self.drivers,
            "weights": {k: np.asarray(v).tolist() for k, v in self.weights.items()},
            "order": self.order,
            "centers": {k: list(v) for k, v in self.centers.items()},
        }


@dataclass
class SynthDataset:
    spec: SynthSpec
    grid: VolumeGrid
    mask: Mask
    truth: GroundTruth
    runs: list
    atlas: Atlas
    csf: np.ndarray

    def split(self, name):
        return [r for r in self.runs if r.split == name]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _coords(dims):
    return np.indices(dims).reshape(3, -1, order="F").T.astype(float)


def place_centers(dims, n, radius, csf_radius, rng, attempts=200):
    """Random blob centers inside the grid interior, clear of each other, the
    edge shell and the central CSF ellipsoid.

    Candidates are the admissible points of a half-voxel lattice; each attempt
    visits them in random order and keeps every one far enough from those
    already kept.
    """
    if n == 0:
        return []
    lo = radius + 1.0
    hi = np.asarray(dims, dtype=float) - 2.0 - radius
    if np.any(hi < lo):
        raise OverlapInfeasible(f"radius {radius} does not fit grid {dims}")
    axes = [np.arange(lo, h + 1e-9, 0.5) for h in hi]
    cand = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    middle = (np.asarray(dims, dtype=float) - 1) / 2.0
    cand = cand[np.linalg.norm(cand - middle, axis=1) >= radius + csf_radius + 0.5]
    for _ in range(attempts):
        kept = []
        for c in cand[rng.permutation(len(cand))]:
            if all(np.linalg.norm(c - o) >= 2 * radius + 1 for o in kept):
                kept.append(c)
                if len(kept) == n:
                    return [tuple(float(x) for x in c) for c in kept]
    raise OverlapInfeasible(f"cannot place {n} blobs of radius {radius} in grid {dims}")


def blob_map(coords, center, radius, sigma):
    d = np.linalg.norm(coords - np.asarray(center), axis=1)
    return np.where(d <= radius, np.exp(-d ** 2 / (2 * sigma ** 2)), 0.0)


def face_map(dims, coords):
    """Interior of the x=0 face: lies in the boundary shell, away from the other faces."""
    nx, ny, nz = dims
    x, y, z = coords.T
    return ((x == 0) & (y > 0) & (y < ny - 1) & (z > 0) & (z < nz - 1)).astype(float)


def csf_volume(dims, radius):
    middle = (np.asarray(dims, dtype=float) - 1) / 2.0
    d = np.linalg.norm(_coords(dims) - middle, axis=1)
    return Mask.full(VolumeGrid(dims)).to_volume(d <= radius) > 0


# ---------------------------------------------------------------------------
# stimulus
# ---------------------------------------------------------------------------

def _smooth_noise(rng, n, width):
    x = rng.standard_normal(n + 4 * width)
    kernel = np.exp(-0.5 * (np.arange(-2 * width, 2 * width + 1) / width) ** 2)
    y = np.convolve(x, kernel / np.sqrt((kernel ** 2).sum()), mode="valid")
    return y[:n]


def make_words(rng, duration, words_per_sec, vocab_size):
    """Word onsets from a slowly modulated rate, with surprisal drawn per word
    independently of the rate."""
    n_sec = int(np.ceil(duration)) + 1
    modulation = np.exp(0.35 * _smooth_noise(rng, n_sec, 8))
    onsets, offsets, tokens, surprisal = [], [], [], []
    t = float(rng.uniform(0.0, 0.5))
    while True:
        rate = words_per_sec * modulation[min(int(t), n_sec - 1)]
        dur = rng.gamma(4.0, 1.0 / (4.0 * rate))
        if t + 0.85 * dur >= duration - 1e-6:
            break
        onsets.append(t)
        offsets.append(t + 0.85 * dur)
        tokens.append(f"w{int(rng.integers(vocab_size)):04d}")
        surprisal.append(0.5 + rng.gamma(2.0, 1.5))
        t += dur
    return WordTable(tokens, onsets, offsets, np.asarray(surprisal))


def _tracks(words, n_trs, tr, standardize, with_embeddings, embeddings):
    cfg = FeatureConfig(tracks=["word_rate", "residual_surprisal"] + (["embeddings"] if with_embeddings else []))
    mats = build_tracks(words, tr, n_trs, cfg, embeddings if with_embeddings else None)
    out = {}
    for name, mat in zip(cfg.tracks, mats):
        data = mat.data
        if standardize:
            # scale only: centering would make the zero history before the
            # story start disagree with the lagged design the pipeline builds
            sd = data.std(axis=0)
            data = data / np.where(sd > 0, sd, 1.0)
        out[name] = FeatureMatrix(data, mat.names, tr)
    return out


def driven_timecourse(track, weights, delays):
    """``sum_j sum_d weights[j, d] * track[t - d, j]`` with zero history."""
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[None, :]
    lagged = fir_expand(track, delays).data            # delay-major columns
    d_in = track.d
    coef = np.concatenate([w[:, i] for i in range(len(delays))])
    if coef.size != lagged.shape[1] or w.shape[0] != d_in:
        raise ConfigError(f"weights shape {w.shape} does not fit a {d_in}-column track")
    return lagged @ coef


def _motion(rng, n, step, coef=0.5):
    # Stationary AR(1) jitter. Random walks would share slow power with the
    # stimulus responses and regressing them out would remove real signal.
    walk = lfilter([1.0], [1.0, -coef], rng.normal(0.0, step, size=(n, 6)), axis=0)
    walk[:, 3:] *= 0.02                                  # rotations in radians
    diff = np.vstack([np.zeros((1, 6)), np.diff(walk, axis=0)])
    fd = np.abs(diff[:, :3]).sum(axis=1) + 50.0 * np.abs(diff[:, 3:]).sum(axis=1)
    return ConfoundMatrix(np.column_stack([walk, fd]), list(MOTION_NAMES) + ["framewise_displacement"])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _default_weights(comp, spec, rng):
    if comp.weights is not None:
        return np.asarray(comp.weights, dtype=float)
    base = np.asarray(HRF_WEIGHTS[: len(spec.delays)], dtype=float)
    if len(base) < len(spec.delays):
        base = np.resize(base, len(spec.delays))
    if comp.driver == "embeddings":
        mix = rng.normal(0.0, 1.0, size=spec.d_emb)
        return np.outer(mix / np.linalg.norm(mix), base)
    return base


def run_plan(spec):
    plan = []
    for split in ("estimation", "train", "test"):
        for i in range(spec.runs.get(split, 0)):
            n = spec.test_n_trs if split == "test" else spec.n_trs
            plan.append((f"{split}{i + 1:02d}", split, n))
    return plan


def generate(spec=None):
    """Build every run plus the ground truth. Pure function of ``spec``."""
    spec = spec or SynthSpec()
    source_seed = spec.seed if spec.source_seed is None else spec.source_seed
    stimulus_seed = spec.seed if spec.stimulus_seed is None else spec.stimulus_seed
    src_rng = np.random.default_rng([source_seed, 1])
    stim_rng = np.random.default_rng([stimulus_seed, 2])
    subj_rng = np.random.default_rng([spec.seed, 3])

    grid = spec.grid
    mask = Mask.full(grid)
    coords = _coords(spec.dims)
    blobs = [c for c in spec.components if c.kind == "blob"]
    centers = spec.centers or place_centers(spec.dims, len(blobs), spec.blob_radius, spec.csf_radius, src_rng)
    if len(centers) != len(blobs):
        raise ConfigError(f"{len(centers)} centers given for {len(blobs)} blobs")

    planted, center_map, parcels = [], {}, []
    blob_iter = iter(centers)
    for comp in spec.components:
        if comp.kind == "blob":
            c = tuple(next(blob_iter))
            base = blob_map(coords, c, spec.blob_radius, spec.blob_sigma)
            center_map[comp.name] = c
            parcels.append((comp.name, mask.to_volume(base > 0) > 0))
        else:
            base = face_map(spec.dims, coords)
        texture = 1.0 + spec.texture * src_rng.laplace(size=base.size)
        planted.append(base * np.abs(texture))
    planted = np.array(planted)
    planted *= spec.source_scale / planted.std(axis=1, keepdims=True)

    weights = {comp.name: _default_weights(comp, spec, src_rng)
               for comp in spec.components if comp.driver is not None}

    order = list(range(spec.k_true))
    if spec.shuffle_components:
        order = [int(i) for i in subj_rng.permutation(spec.k_true)]
    sources = planted[order]
    vocab = np.asarray(stim_rng.standard_normal((spec.vocab_size, spec.d_emb)), dtype=np.float32)
    use_emb = any(c.driver == "embeddings" for c in spec.components)

    stimuli = []
    for run_id, split, n_trs in run_plan(spec):
        words = make_words(stim_rng, n_trs * spec.tr, spec.words_per_sec, spec.vocab_size)
        emb = vocab[[int(t[1:]) for t in words.tokens]].astype(np.float64)
        stimuli.append((words, emb, _tracks(words, n_trs, spec.tr, spec.standardize_tracks, use_emb, emb)))

    # drawn weights are rescaled so each driven time course has unit variance
    # pooled over all runs; explicit weights are used as given
    for comp in spec.components:
        if comp.driver is not None and comp.weights is None:
            tc = np.concatenate([driven_timecourse(t[comp.driver], weights[comp.name], spec.delays)
                                 for _, _, t in stimuli])
            weights[comp.name] = weights[comp.name] / tc.std()
    if spec.weight_jitter:
        for name, w in weights.items():
            weights[name] = w * (1.0 + spec.weight_jitter * subj_rng.standard_normal(w.shape))

    runs = []
    for (run_id, split, n_trs), (words, emb, tracks) in zip(run_plan(spec), stimuli):
        a = np.empty((n_trs, spec.k_true))
        for j, comp in enumerate(spec.components):
            if comp.driver is not None:
                tc = driven_timecourse(tracks[comp.driver], weights[comp.name], spec.delays)
                tc = tc + spec.innovation_sd * subj_rng.standard_normal(n_trs)
            elif comp.kind == "artifact":
                tc = subj_rng.standard_normal(n_trs)
                hits = subj_rng.random(n_trs) < spec.spike_rate
                tc[hits] += spec.spike_amplitude * subj_rng.choice([-1.0, 1.0], size=hits.sum())
            else:
                e = subj_rng.standard_normal(n_trs)
                tc = np.empty(n_trs)
                tc[0] = e[0]
                for t in range(1, n_trs):
                    tc[t] = spec.ar_coef * tc[t - 1] + np.sqrt(1 - spec.ar_coef ** 2) * e[t]
            a[:, j] = tc
        a = a[:, order]
        x = a @ sources
        if spec.noise_sd > 0:
            x = x + spec.noise_sd * subj_rng.standard_normal(x.shape)
        series = VolumeSeries(grid, mask, spec.tr, x)
        runs.append(RunData(run_id, split, series, words, emb, _motion(subj_rng, n_trs, spec.motion_step), a))

    names = [spec.components[i].name for i in order]
    truth = GroundTruth(
        sources=sources,
        names=names,
        driven=[p for p, i in enumerate(order) if spec.components[i].driver is not None],
        artifacts=[p for p, i in enumerate(order) if spec.components[i].kind == "artifact"],
        drivers={c.name: c.driver for c in spec.components},
        weights=weights,
        order=order,
        centers=center_map,
        grid=grid,
        mask=mask,
    )
    return SynthDataset(spec, grid, mask, truth, runs, Atlas(grid, parcels), csf_volume(spec.dims, spec.csf_radius))


def subject_specs(base, n_subjects, seed=0):
    """Specs for subjects who share sources and stimuli but differ in noise,
    undriven dynamics, small weight perturbations and component order."""
    out = []
    for i in range(n_subjects):
        d = base.to_dict()
        d.update(seed=int(seed) * 1000 + i + 1,
                 source_seed=base.source_seed if base.source_seed is not None else base.seed,
                 stimulus_seed=base.stimulus_seed if base.stimulus_seed is not None else base.seed,
                 shuffle_components=True)
        out.append(SynthSpec(**d))
    return out


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def write_dataset(ds, out, dtype="f32", k=None):
    """Emit volumes, word tables, embeddings, confounds, masks, atlas, truth
    and a pipeline config ready for ``run-all``. Returns the config path."""
    out = Path(out)
    for sub in ("runs", "words", "embeddings", "confounds"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_mask(ds.mask, out / "mask.vxt")
    write_mask(Mask(ds.grid, ds.csf), out / "csf_mask.vxt")
    write_atlas(ds.atlas, out / "atlas.vxt")
    truth_meta = {**ds.truth.to_dict(), "spec": ds.spec.to_dict()}
    atomic_write_text(out / "truth.json", json.dumps(truth_meta, indent=1, sort_keys=True) + "\n")
    write_vxt(ds.grid, ds.mask, 1.0, ds.truth.sources, out / "truth_sources.vxt", "f64")

    splits = {"estimation": [], "train": [], "test": []}
    for run in ds.runs:
        write_volume_series(run.series, out / "runs" / f"{run.run_id}.vxt", dtype)
        write_word_table(run.words, out / "words" / f"{run.run_id}.tsv")
        write_embeddings(run.embeddings, out / "embeddings" / f"{run.run_id}.f32")
        write_confounds(run.confounds, out / "confounds" / f"{run.run_id}.tsv")
        entry = {"id": run.run_id, "volume": f"runs/{run.run_id}.vxt",
                 "confounds": f"confounds/{run.run_id}.tsv"}
        if run.split != "estimation":
            entry.update(words=f"words/{run.run_id}.tsv", embeddings=f"embeddings/{run.run_id}.f32")
        splits[run.split].append(entry)

    config = {
        "paths": {"mask": "mask.vxt", "atlas": "atlas.vxt", "csf_mask": "csf_mask.vxt", **splits},
        "ica": {"k": int(k or ds.spec.k_true), "seed": 0},
        "features": {"tracks": ["word_rate", "residual_surprisal"]
                     + (["embeddings"] if any(c.driver == "embeddings" for c in ds.spec.components) else [])},
        "ridge": {"fold_scheme": "by-story" if len(splits["train"]) >= 5 else "blocks"},
        "output_dir": "out",
    }
    path = out / "config.json"
    atomic_write_text(path, json.dumps(config, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass
class Recovery:
    scores: np.ndarray        # (k_true,) best |r| per true source
    assignment: np.ndarray    # (k_true,) recovered index per true source
    signs: np.ndarray         # (k_true,) sign of the matched correlation
    unassigned: list          # recovered components left over

    def to_dict(self):
        return {"scores": self.scores.tolist(), "assignment": self.assignment.tolist(),
                "signs": self.signs.tolist(), "unassigned": self.unassigned}


def score_recovery(truth, model):
    """Greedy max-|spatial r| assignment of true sources to recovered ones, no reuse."""
    true_s = np.asarray(getattr(truth, "sources", truth), dtype=float)
    rec = np.asarray(getattr(model, "sources", model), dtype=float)
    if true_s.shape[1] != rec.shape[1]:
        raise GridMismatch(f"true sources have {true_s.shape[1]} voxels, recovered {rec.shape[1]}")
    ga, gb = getattr(truth, "grid", None), getattr(model, "grid", None)
    if ga is not None and gb is not None and ga != gb:
        raise GridMismatch("truth and model grids differ")
    r = _corr_matrix(true_s, rec)
    mag = np.abs(r)
    k_true = true_s.shape[0]
    assignment = np.full(k_true, -1)
    scores = np.zeros(k_true)
    signs = np.ones(k_true)
    free_t, free_r = set(range(k_true)), set(range(rec.shape[0]))
    while free_t and free_r:
        ti = sorted(free_t)
        ri = sorted(free_r)
        sub = mag[np.ix_(ti, ri)]
        a, b = np.unravel_index(np.argmax(sub), sub.shape)
        t, j = ti[a], ri[b]
        assignment[t], scores[t], signs[t] = j, mag[t, j], np.sign(r[t, j]) or 1.0
        free_t.discard(t)
        free_r.discard(j)
    return Recovery(scores, assignment, signs, sorted(free_r))
