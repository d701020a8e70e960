"""Staged, cached analysis pipeline.

Each stage reads upstream artifacts from disk, writes its own under
``<output_dir>/<stage>/`` and records a ``stage.json`` holding a content key
(digest of its config block, raw input files and upstream keys) plus the
digest of every output. A stage is skipped when its key matches and all
outputs are intact; deleting any output forces a rerun that reproduces it.

The numerical steps live in plain functions (``clean_run``,
``estimate_components``, ``run_design``, ``encode_components``...) so they
can also be driven in memory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .aroma import aroma_features, classify, edge_mask, motion_columns
from .dataio import (
    VolumeSeries,
    atomic_write_text,
    file_digest,
    read_atlas,
    read_embeddings,
    read_mask,
    read_matrix_tsv,
    read_volume_series,
    read_word_table,
    vxt_header,
    write_matrix_tsv,
    write_volume_series,
)
from .encoder import (
    fit_ridge,
    pearson_columns,
    predict,
    save_encoding_model,
    targets_from_rois,
)
from .errors import (
    ConfigError,
    GridMismatch,
    IcaEncError,
    MaskMismatch,
    NetworkUnresolved,
    NonConverged,
)
from .features import FeatureConfig, assemble_design, build_tracks, concat_columns
from .ica import (
    ComponentSeries,
    fit_ica,
    load_component_series,
    load_model,
    project,
    save_component_series,
    save_model,
    sign_align,
)
from .matching import SubjectBundle, loo_aggregate, match_atlas
from .preprocess import clean, read_confounds, zscore_columns
from .stats import PredictivityReport, bh_fdr, permutation_test

log = logging.getLogger("icaenc")

STAGES = ("preprocess", "ica-fit", "project", "features", "encode", "baselines",
          "permtest", "fdr", "aroma", "match-atlas", "report", "feature-analysis")
DEPENDS = {
    "preprocess": (),
    "ica-fit": ("preprocess",),
    "project": ("preprocess", "ica-fit"),
    "features": (),
    "encode": ("project", "features"),
    "baselines": ("preprocess", "features"),
    "permtest": ("encode",),
    "fdr": ("permtest",),
    "aroma": ("project", "ica-fit"),
    "match-atlas": ("ica-fit",),
    "report": ("encode", "fdr", "aroma"),
    "feature-analysis": ("project", "match-atlas"),
}
SPLIT_ORDER = ("estimation", "train", "test")


# ---------------------------------------------------------------------------
# in-memory steps
# ---------------------------------------------------------------------------

def restrict_to_mask(series, mask):
    """Re-express ``series`` over ``mask`` (which must lie inside the series mask)."""
    if mask is None or series.mask == mask:
        return series
    if series.grid != mask.grid:
        raise GridMismatch("run grid differs from the analysis mask grid")
    if np.any(mask.included & ~series.mask.included):
        raise MaskMismatch("analysis mask includes voxels the run does not cover")
    vols = series.mask.to_volume(series.data)
    return VolumeSeries(series.grid, mask, series.tr, mask.from_volume(vols))


def clean_run(series, confounds, config):
    """Preprocess one run with a PreprocessConfig."""
    return clean(series, config, confounds)


def estimate_components(series_list, k, seed=0, tol=1e-4, max_iter=200):
    """Fit spatial ICA on time-concatenated runs and sign-align the sources.

    Non-convergence is reported as a warning and the best iterate is kept.
    """
    first = series_list[0]
    data = np.vstack([s.data for s in series_list])
    joined = VolumeSeries(first.grid, first.mask, first.tr, data)
    try:
        model = fit_ica(joined, k=k, seed=seed, max_iter=max_iter, tol=tol)
    except NonConverged as exc:
        warnings.warn(f"{exc}; continuing with the best iterate", stacklevel=2)
        model = exc.model
    return sign_align(model)


def run_design(words, embeddings, n_trs, tr, config, head=0, tail=0):
    """Design matrix (FIR, trimmed, z-scored) and its pre-FIR rows for one run."""
    tracks = build_tracks(words, tr, n_trs, config, embeddings)
    design = assemble_design(tracks, config.delays, head, tail)
    pre = concat_columns(tracks)
    pre_rows = zscore_columns(pre.data[head:n_trs - tail], warn=False)
    return design, pre_rows, pre.names


def encode_components(x_train, y_train, x_test, y_test, spec, groups=None, seed=0):
    """Fit ridge on training rows; return ``(model, test prediction, test r)``."""
    model = fit_ridge(x_train, y_train, spec, seed=seed, groups=groups)
    pred = predict(model, x_test)
    return model, pred, pearson_columns(pred, y_test)


def single_feature_scores(designs_train, y_train, designs_test, y_test, spec, groups=None, seed=0):
    """Test r of separate encoding models, one per entry of the design dicts."""
    out = {}
    for name in designs_train:
        _, _, r = encode_components(designs_train[name], y_train, designs_test[name], y_test, spec, groups, seed)
        out[name] = r
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, rows, columns=None, header_lines=()):
    columns = columns or (list(rows[0]) if rows else [])
    lines = [f"# {h}" for h in header_lines]
    lines.append(",".join(columns))
    lines.extend(",".join(_cell(row.get(c)) for c in columns) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path):
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if not line.startswith("#")]
    cols = lines[0].split(",")
    return [dict(zip(cols, line.split(","))) for line in lines[1:] if line]


def _sha(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StageRecord:
    name: str
    key: str
    cached: bool


class Pipeline:
    """Disk-backed runner for one subject's config."""

    def __init__(self, config):
        self.cfg = config
        self.out = Path(config.output_dir)
        self.keys = {}
        self.records = []
        self._digests = {}
        self._mask = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def header(self):
        return [f"icaenc {__version__}", f"config_digest: {self.cfg.digest}"]

    def stage_dir(self, name):
        return self.out / name

    def _digest(self, path):
        if path is None:
            return None
        key = str(path)
        if key not in self._digests:
            self._digests[key] = file_digest(path)
        return self._digests[key]

    def _runs(self, *splits):
        return [(split, run) for split in splits for run in self.cfg.runs[split]]

    def _inputs(self, name):
        cfg = self.cfg
        runs = lambda *s: {r.id: {f: self._digest(getattr(r, f)) for f in ("volume", "confounds", "words", "embeddings")}
                           for _, r in self._runs(*s)}
        if name == "preprocess":
            return {"runs": runs(*SPLIT_ORDER), "mask": self._digest(cfg.mask),
                    "ica": cfg.block("preprocess_ica"), "encoding": cfg.block("preprocess_encoding"),
                    "test_trim_head": cfg.test_trim_head}
        if name == "ica-fit":
            return {"ica": cfg.block("ica")}
        if name == "project":
            return {}
        if name == "features":
            return {"runs": runs("train", "test"), "features": cfg.block("features"),
                    "trims": [cfg.preprocess_encoding.trim_head, cfg.preprocess_encoding.trim_tail, cfg.test_trim_head]}
        if name == "encode":
            return {"ridge": cfg.block("ridge")}
        if name == "baselines":
            return {"ridge": cfg.block("ridge"), "atlas": self._digest(cfg.atlas), "enabled": cfg.baselines}
        if name == "permtest":
            # q only matters to the fdr stage
            stats = {k: v for k, v in cfg.block("stats").items() if k != "q"}
            return {"stats": stats, "delays": list(cfg.features.delays)}
        if name == "fdr":
            return {"q": cfg.stats.q}
        if name == "aroma":
            return {"aroma": cfg.block("aroma"), "csf": self._digest(cfg.csf_mask), "edge": self._digest(cfg.edge_mask),
                    "confounds": {r.id: self._digest(r.confounds) for _, r in self._runs("train")}}
        if name == "match-atlas":
            return {"matching": cfg.block("matching"), "atlas": self._digest(cfg.atlas)}
        if name == "report":
            return {"config": cfg.digest, "matching": cfg.matching.enabled, "baselines": cfg.baselines}
        if name == "feature-analysis":
            return {"runs": runs("train", "test"), "fa": cfg.block("feature_analysis"),
                    "features": cfg.block("features"), "ridge": cfg.block("ridge")}
        raise ConfigError(f"unknown stage {name!r}")

    def _deps(self, name):
        deps = list(DEPENDS[name])
        if name == "report":
            if self.cfg.matching.enabled:
                deps.append("match-atlas")
            if self.cfg.baselines:
                deps.append("baselines")
        return deps

    def _key(self, name):
        upstream = {d: self.keys[d] for d in self._deps(name)}
        return _sha({"stage": name, "version": __version__, "inputs": self._inputs(name), "upstream": upstream})

    def _outputs(self, directory):
        return sorted(p for p in directory.rglob("*") if p.is_file() and p.name != "stage.json")

    def _cached(self, name, key):
        record = self.stage_dir(name) / "stage.json"
        if not record.exists():
            return False
        try:
            meta = json.loads(record.read_text())
        except json.JSONDecodeError:
            return False
        if meta.get("key") != key:
            return False
        for rel, digest in meta.get("outputs", {}).items():
            path = self.stage_dir(name) / rel
            if not path.exists() or hashlib.sha256(path.read_bytes()).hexdigest() != digest:
                return False
        return True

    def run(self, name):
        if name in self.keys:
            return self.keys[name]
        if name not in DEPENDS:
            raise ConfigError(f"unknown stage {name!r}")
        if name == "match-atlas" and self.cfg.atlas is None:
            raise ConfigError("paths.atlas: required for match-atlas")
        for dep in self._deps(name):
            self.run(dep)
        key = self._key(name)
        directory = self.stage_dir(name)
        if self._cached(name, key):
            log.info("stage %s: cached", name)
            self.records.append(StageRecord(name, key, True))
        else:
            log.info("stage %s: running", name)
            directory.mkdir(parents=True, exist_ok=True)
            try:
                getattr(self, "_stage_" + name.replace("-", "_"))(directory)
            except IcaEncError as exc:
                exc.stage = name
                raise
            outputs = {str(p.relative_to(directory)): hashlib.sha256(p.read_bytes()).hexdigest()
                       for p in self._outputs(directory)}
            atomic_write_text(directory / "stage.json",
                              json.dumps({"stage": name, "key": key, "outputs": outputs}, indent=1, sort_keys=True) + "\n")
            self.records.append(StageRecord(name, key, False))
        self.keys[name] = key
        return key

    def run_all(self):
        for name in ("preprocess", "ica-fit", "project", "features", "encode", "permtest", "fdr", "aroma"):
            self.run(name)
        if self.cfg.matching.enabled:
            self.run("match-atlas")
        if self.cfg.baselines:
            self.run("baselines")
        self.run("report")
        if self.cfg.matching.enabled and self.cfg.feature_analysis.networks:
            self.run("feature-analysis")
        return self.out / "report"

    # -- loaders -----------------------------------------------------------

    def mask(self):
        if self._mask is None and self.cfg.mask is not None:
            self._mask = read_mask(self.cfg.mask)
        return self._mask

    def preprocessed(self, split, run_id):
        return read_volume_series(self.stage_dir("preprocess") / split / f"{run_id}.vxt")

    def model(self):
        return load_model(self.stage_dir("ica-fit") / "model")

    def components(self, split):
        return [load_component_series(self.stage_dir("project") / split / f"{r.id}.tsv") for r in self.cfg.runs[split]]

    def designs(self, split, pre=False):
        suffix = ".pre.tsv" if pre else ".tsv"
        return [read_matrix_tsv(self.stage_dir("features") / split / f"{r.id}{suffix}") for r in self.cfg.runs[split]]

    def groups(self, split):
        labels = []
        for (data, _, _), run in zip(self.designs(split), self.cfg.runs[split]):
            labels.extend([run.id] * data.shape[0])
        return np.asarray(labels)

    def trims(self, split):
        enc = self.cfg.encoding_for(split)
        return enc.trim_head, enc.trim_tail

    def confounds(self, run, trim=None):
        if run.confounds is None:
            return None
        enc = self.cfg.preprocess_encoding
        conf = read_confounds(run.confounds, enc.confound_columns, enc.fd_spike_threshold)
        return conf if trim is None else conf.trim(*trim)

    # -- stages ------------------------------------------------------------

    def _stage_preprocess(self, directory):
        mask = self.mask()
        for split, run in self._runs(*SPLIT_ORDER):
            cfg = self.cfg.preprocess_ica if split == "estimation" else self.cfg.encoding_for(split)
            series = restrict_to_mask(read_volume_series(run.volume), mask)
            conf = None
            if run.confounds is not None:
                conf = read_confounds(run.confounds, cfg.confound_columns, cfg.fd_spike_threshold)
            cleaned = clean_run(series, conf, cfg)
            (directory / split).mkdir(exist_ok=True)
            write_volume_series(cleaned, directory / split / f"{run.id}.vxt", "f32",
                                {"config_digest": self.cfg.digest, "stage": "preprocess", "split": split})

    def _stage_ica_fit(self, directory):
        series = [self.preprocessed("estimation", r.id) for r in self.cfg.runs["estimation"]]
        ica = self.cfg.ica
        model = estimate_components(series, ica.k, ica.seed, ica.tol, ica.max_iter)
        save_model(model, directory / "model")

    def _stage_project(self, directory):
        model = self.model()
        for split, run in self._runs("train", "test"):
            cs = project(model, self.preprocessed(split, run.id), run.id)
            (directory / split).mkdir(exist_ok=True)
            save_component_series(cs, directory / split / f"{run.id}.tsv", self.header)

    def _stage_features(self, directory):
        for split, run in self._runs("train", "test"):
            header = vxt_header(run.volume)
            words = read_word_table(run.words)
            emb = read_embeddings(run.embeddings, words) if "embeddings" in self.cfg.features.tracks else None
            head, tail = self.trims(split)
            design, pre, pre_names = run_design(words, emb, int(header["T"]), float(header["tr"]),
                                                self.cfg.features, head, tail)
            (directory / split).mkdir(exist_ok=True)
            meta = {"run_id": run.id, "provenance": design.provenance, "trim": [head, tail]}
            write_matrix_tsv(design.data, directory / split / f"{run.id}.tsv", design.names, meta, self.header)
            write_matrix_tsv(pre, directory / split / f"{run.id}.pre.tsv", pre_names, None, self.header)

    def _train_test(self):
        y_train = np.vstack([c.data for c in self.components("train")])
        y_test = np.vstack([c.data for c in self.components("test")])
        x_train = np.vstack([d for d, _, _ in self.designs("train")])
        x_test = np.vstack([d for d, _, _ in self.designs("test")])
        if x_train.shape[0] != y_train.shape[0] or x_test.shape[0] != y_test.shape[0]:
            raise ConfigError("design rows do not match component rows; check trims")
        return x_train, y_train, x_test, y_test

    def _stage_encode(self, directory):
        x_train, y_train, x_test, y_test = self._train_test()
        names = self.designs("train")[0][1]
        model, pred, r = encode_components(x_train, y_train, x_test, y_test, self.cfg.ridge,
                                           self.groups("train"), self.cfg.stats.seed)
        model.feature_names = names
        save_encoding_model(model, directory / "model")
        cols = [f"ic{j:03d}" for j in range(y_test.shape[1])]
        write_matrix_tsv(pred, directory / "test_prediction.tsv", cols, None, self.header)
        write_matrix_tsv(y_test, directory / "test_actual.tsv", cols, None, self.header)
        rows = [{"component": j, "r": r[j], "cv_r": model.cv_scores[:, j].mean(), "alpha": model.alpha_per_target[j]}
                for j in range(r.size)]
        write_csv(directory / "scores.csv", rows, header_lines=self.header)

    def encode_scores(self):
        rows = read_csv(self.stage_dir("encode") / "scores.csv")
        return {k: np.array([float(row[k]) for row in rows]) for k in ("r", "cv_r", "alpha")}

    def _stage_baselines(self, directory):
        rows = []
        if self.cfg.baselines:
            train = [self.preprocessed("train", r.id) for r in self.cfg.runs["train"]]
            test = [self.preprocessed("test", r.id) for r in self.cfg.runs["test"]]
            x_train = np.vstack([d for d, _, _ in self.designs("train")])
            x_test = np.vstack([d for d, _, _ in self.designs("test")])
            groups = self.groups("train")
            seed = self.cfg.stats.seed
            vy_train = np.vstack([s.data for s in train])
            vy_test = np.vstack([s.data for s in test])
            _, _, vr = encode_components(x_train, vy_train, x_test, vy_test, self.cfg.ridge, groups, seed)
            rows.append({"model": "voxel", "target": "all", "r": float(vr.mean()), "n_voxels": vr.size})
            if self.cfg.atlas is not None:
                atlas = read_atlas(self.cfg.atlas)
                member = atlas.in_mask(train[0].mask)
                ry_train = np.vstack([targets_from_rois(s, atlas) for s in train])
                ry_test = np.vstack([targets_from_rois(s, atlas) for s in test])
                _, _, rr = encode_components(x_train, ry_train, x_test, ry_test, self.cfg.ridge, groups, seed)
                for i, name in enumerate(atlas.names):
                    rows.append({"model": "roi", "target": name, "r": float(rr[i]), "n_voxels": int(member[i].sum())})
                    rows.append({"model": "voxel", "target": name, "r": float(vr[member[i]].mean()),
                                 "n_voxels": int(member[i].sum())})
        write_csv(directory / "baselines.csv", rows, ["model", "target", "r", "n_voxels"], self.header)

    def _stage_permtest(self, directory):
        pre = np.vstack([d for d, _, _ in self.designs("train", pre=True)])
        y_train = np.vstack([c.data for c in self.components("train")])
        scores = self.encode_scores()
        st = self.cfg.stats
        p, observed = permutation_test(
            pre, y_train, self.cfg.ridge, n_perm=st.n_perm, seed=st.seed, alphas=scores["alpha"],
            delays=self.cfg.features.delays, groups=self.groups("train"), block_len=st.block_len,
            fold_seed=st.seed, n_jobs=self.cfg.jobs,
        )
        rows = [{"component": j, "p": p[j], "cv_r_concat": observed[j]} for j in range(p.size)]
        write_csv(directory / "permtest.csv", rows, header_lines=self.header + [f"n_perm: {st.n_perm}"])

    def _stage_fdr(self, directory):
        rows = read_csv(self.stage_dir("permtest") / "permtest.csv")
        p = np.array([float(r["p"]) for r in rows])
        sig = bh_fdr(p, self.cfg.stats.q)
        out = [{"component": j, "p": p[j], "significant": bool(sig[j])} for j in range(p.size)]
        write_csv(directory / "fdr.csv", out, header_lines=self.header + [f"q: {self.cfg.stats.q}"])

    def _stage_aroma(self, directory):
        model = self.model()
        series = self.components("train")
        data = np.vstack([c.data for c in series])
        motion = None
        confs = [self.confounds(r, self.trims("train")) for r in self.cfg.runs["train"]]
        if all(c is not None for c in confs):
            motion = np.vstack([motion_columns(c) for c in confs])
        csf = read_mask(self.cfg.csf_mask) if self.cfg.csf_mask else None
        edge = read_mask(self.cfg.edge_mask) if self.cfg.edge_mask else edge_mask(model.mask)
        feats = aroma_features(model, ComponentSeries(data, series[0].tr), edge, csf, motion, self.cfg.aroma)
        labels = classify(feats, self.cfg.aroma)
        rows = [{"component": j, **{k: v[j] for k, v in feats.columns().items()}, "label": labels[j]}
                for j in range(model.k)]
        write_csv(directory / "aroma.csv", rows, header_lines=self.header)

    def _stage_match_atlas(self, directory):
        model = self.model()
        atlas = read_atlas(self.cfg.atlas)
        m = self.cfg.matching
        res = match_atlas(model, atlas, m.percentile, m.weighted)
        write_csv(directory / "atlas_match.csv", res.rows(), header_lines=self.header)
        parcels = [{"parcel": name, "best_component": int(res.parcel_best_component[i]),
                    "spatial_r": res.parcel_best_r[i]} for i, name in enumerate(res.parcel_names)]
        write_csv(directory / "parcels.csv", parcels, header_lines=self.header)

    def _stage_report(self, directory):
        from .plots import grouped_bars, predictivity_bars
        scores = self.encode_scores()
        fdr = read_csv(self.stage_dir("fdr") / "fdr.csv")
        aroma = read_csv(self.stage_dir("aroma") / "aroma.csv")
        extra = {key: [float(row[key]) for row in aroma] for key in ("hfc", "edge_frac", "csf_frac", "motion_corr")}
        extra["cv_r"] = scores["cv_r"]
        extra["alpha"] = scores["alpha"]
        if self.cfg.matching.enabled:
            match = read_csv(self.stage_dir("match-atlas") / "atlas_match.csv")
            extra["network"] = [row["best_parcel"] for row in match]
            extra["spatial_r"] = [float(row["spatial_r"]) for row in match]
            extra["low_confidence"] = [row["low_confidence"] for row in match]
        report = PredictivityReport(
            r=scores["r"],
            p=np.array([float(row["p"]) for row in fdr]),
            significant=np.array([row["significant"] == "1" for row in fdr]),
            labels=[row["label"] for row in aroma],
            extra=extra,
        )
        report.to_csv(directory / "predictivity.csv", self.header)
        summary = report.summary()
        summary["n_noise"] = int(sum(row["label"] == "noise" for row in aroma))
        summary["config_digest"] = self.cfg.digest
        meta = json.loads((self.stage_dir("ica-fit") / "model" / "model.json").read_text())
        summary["ica"] = {k: meta[k] for k in ("k", "n_iter", "converged", "final_delta", "seed")}
        atomic_write_text(directory / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
        predictivity_bars(report.r, report.labels, directory / "predictivity.svg")
        if self.cfg.matching.enabled and self.cfg.baselines:
            parcels = read_csv(self.stage_dir("match-atlas") / "parcels.csv")
            base = read_csv(self.stage_dir("baselines") / "baselines.csv")
            names = [row["parcel"] for row in parcels]
            ic_r = [scores["r"][int(row["best_component"])] for row in parcels]
            lookup = {(row["model"], row["target"]): float(row["r"]) for row in base}
            rows = [{"network": n, "ic_em": ic_r[i], "roi_em": lookup.get(("roi", n)),
                     "voxel_em": lookup.get(("voxel", n)), "component": parcels[i]["best_component"]}
                    for i, n in enumerate(names)]
            write_csv(directory / "networks.csv", rows, header_lines=self.header)
            grouped_bars(names, {"IC-EM": ic_r, "ROI-EM": [r["roi_em"] for r in rows],
                                 "Voxel-EM": [r["voxel_em"] for r in rows]},
                         directory / "networks.svg", title="Network predictivity")

    def _stage_feature_analysis(self, directory):
        from .plots import grouped_bars
        fa = self.cfg.feature_analysis
        parcels = {row["parcel"]: int(row["best_component"])
                   for row in read_csv(self.stage_dir("match-atlas") / "parcels.csv")}
        missing = [n for n in fa.networks if n not in parcels]
        if missing:
            raise NetworkUnresolved(f"atlas has no parcel named {missing}; available: {sorted(parcels)}")
        comps = [parcels[n] for n in fa.networks]
        y_train = np.vstack([c.data for c in self.components("train")])[:, comps]
        y_test = np.vstack([c.data for c in self.components("test")])[:, comps]
        designs = {"train": {}, "test": {}}
        for feature in fa.features:
            cfg = FeatureConfig(tracks=[feature], delays=list(self.cfg.features.delays),
                                window=self.cfg.features.window, log_base=self.cfg.features.log_base)
            for split in ("train", "test"):
                mats = []
                for run in self.cfg.runs[split]:
                    header = vxt_header(run.volume)
                    words = read_word_table(run.words)
                    emb = read_embeddings(run.embeddings, words) if feature == "embeddings" else None
                    head, tail = self.trims(split)
                    mats.append(run_design(words, emb, int(header["T"]), float(header["tr"]), cfg, head, tail)[0].data)
                designs[split][feature] = np.vstack(mats)
        scores = single_feature_scores(designs["train"], y_train, designs["test"], y_test,
                                       self.cfg.ridge, self.groups("train"), self.cfg.stats.seed)
        rows = [{"network": net, "component": comps[i], "feature": f, "r": scores[f][i]}
                for f in fa.features for i, net in enumerate(fa.networks)]
        write_csv(directory / "feature_analysis.csv", rows, header_lines=self.header)
        grouped_bars(list(fa.networks), {f: list(scores[f]) for f in fa.features},
                     directory / "feature_analysis.svg", title="Single-feature predictivity")

    # -- cross-subject -----------------------------------------------------

    def bundle(self, predicted=True):
        """Inputs for cross-subject matching (runs the pipeline through ``encode``)."""
        self.run("encode")
        model = self.model()
        path = self.stage_dir("encode") / ("test_prediction.tsv" if predicted else "test_actual.tsv")
        series = read_matrix_tsv(path)[0]
        story = "+".join(r.id for r in self.cfg.runs["test"])
        return SubjectBundle(self.cfg.root.name or str(self.cfg.root), model.sources, series,
                             self.encode_scores()["r"], model.mask.digest, model.grid, story)


def match_subject_configs(configs, out, direction="temporal", top_n=5, signed=False, predicted=True):
    """Leave-one-out cross-subject matching over several subject configs."""
    from .plots import grouped_bars
    bundles = []
    for i, cfg in enumerate(configs):
        b = Pipeline(cfg).bundle(predicted)
        b.name = f"sub{i + 1:02d}"
        bundles.append(b)
    summary, results = loo_aggregate(bundles, direction, top_n, signed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _sha([c.digest for c in configs])
    header = [f"icaenc {__version__}", f"config_digest: {digest}", f"direction: {direction}"]
    rows = [row for res in results for row in res.rows()]
    write_csv(out / f"match_{direction}.csv", rows, header_lines=header)
    write_csv(out / f"group_{direction}.csv", summary.rows(), header_lines=header)
    ranks = [str(i + 1) for i in range(summary.top_n)]
    grouped_bars(ranks, {"match r": list(summary.mean_match), "eval r": list(summary.mean_eval)},
                 out / f"group_{direction}.svg", title=f"{direction}-first matching",
                 errors={"match r": list(summary.sd_match), "eval r": list(summary.sd_eval)})
    return summary, results
