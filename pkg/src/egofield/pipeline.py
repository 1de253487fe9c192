"""Staged pipeline over an output directory.

Every stage reads the artifacts of earlier stages from disk and writes its
own, so any stage can be rerun on its own::

    synth/       scene.ini, embeddings.tsv, split.csv, frames/frame_XXXX/...
    segment/     id_maps.estf, frames.estf, instances.estf, switches.csv, prompted.csv
    features/    features.estf, valid.estf, instances.estf, frames.estf
    aggregate/   median/mad/consistent/inliers/targets .estf, inliers.csv
    transient/   initial_maps.estf, init_loss.csv, refined_masks.estf, transient_set.csv
    train/       checkpoint/, loss.csv
    render/      frame_XXXX/{rgb.ppm, rgb.estf, features.estf}
    query/       frame_XXXX_<label>.{estf,ppm}
    eval/        eval_records.csv, eval_table.txt, psnr.csv
    ablation/    <variant>/checkpoint, ablation.csv, ablation.txt
"""
from __future__ import annotations

import logging
import shutil
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from egofield import aggregation, query, storage, transient
from egofield.config import PipelineConfig
from egofield.parallel import pmap
from egofield.perception import EmbeddingTable, FeatureBank, SegmentSet, extract_all, prompt_instances, track
from egofield.scene import GroundTruthFrame, SceneSpec, generate, read_frames, read_scene_spec, write_frames, write_scene_spec
from egofield.splat.gaussians import GaussianSet, load_checkpoint, save_checkpoint
from egofield.splat.render import Background, render
from egofield.trainer import TrainResult, init_gaussians, psnr, train

log = logging.getLogger(__name__)

STAGES = ("synth", "segment", "features", "aggregate", "train-init", "refine", "train",
          "render", "query", "eval", "ablate")
VARIANTS = ("base", "aggregation", "aggregation+transient", "aggregation+init-transient")


class StageError(RuntimeError):
    """A stage failed; ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError("missing-input", f"missing {what}: {path}")
    return path


def _loss_rows(losses):
    return [(it, frame, loss) for it, frame, loss in losses]


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out: str | Path):
        self.cfg = cfg
        self.out = Path(out)

    # ------------------------------------------------------------ loaders

    def _dir(self, name: str) -> Path:
        return self.out / name

    def spec(self) -> SceneSpec:
        return read_scene_spec(_require(self._dir("synth") / "scene.ini", "scene spec (run synth)"))

    def frames(self) -> list[GroundTruthFrame]:
        _require(self._dir("synth") / "frames", "frames (run synth)")
        return read_frames(self._dir("synth") / "frames")

    def table(self) -> EmbeddingTable:
        return EmbeddingTable.read(_require(self._dir("synth") / "embeddings.tsv", "embedding table (run synth)"))

    def split(self, frames: list[GroundTruthFrame], spec: SceneSpec):
        held = set(spec.heldout_frames())
        train_frames = [f for f in frames if f.index not in held]
        heldout = [f for f in frames if f.index in held]
        return train_frames, heldout

    def segments(self) -> SegmentSet:
        _require(self._dir("segment") / "id_maps.estf", "segments (run segment)")
        return SegmentSet.read(self._dir("segment"))

    def bank(self) -> FeatureBank:
        _require(self._dir("features") / "features.estf", "features (run features)")
        return FeatureBank.read(self._dir("features"))

    def background(self, table: EmbeddingTable, spec: SceneSpec) -> Background:
        return Background.make(spec.background, table.background)

    # ------------------------------------------------------------- stages

    def synth(self) -> None:
        spec = read_scene_spec(self.cfg.scene_path)
        spec.seed = self.cfg.seed
        frames = generate(spec)
        d = self._dir("synth")
        d.mkdir(parents=True, exist_ok=True)
        write_scene_spec(d / "scene.ini", spec)
        write_frames(d / "frames", frames)
        table = EmbeddingTable.build(spec.categories(), self.cfg.embedding_dim, self.cfg.n_canonical, seed=self.cfg.seed)
        table.write(d / "embeddings.tsv")
        held = set(spec.heldout_frames())
        storage.write_csv(d / "split.csv", ["frame", "role"],
                          [(j, "heldout" if j in held else "train") for j in range(spec.n_frames)])

    def segment(self) -> None:
        spec, frames = self.spec(), self.frames()
        train_frames, _ = self.split(frames, spec)
        prompted = prompt_instances(train_frames, self.cfg.corruption, self.cfg.seed)
        seg = track(train_frames, self.cfg.corruption, self.cfg.seed, sorted(prompted))
        d = self._dir("segment")
        seg.write(d)
        storage.write_csv(d / "prompted.csv", ["instance"], [(i,) for i in prompted])

    def features(self) -> None:
        spec, frames, table, seg = self.spec(), self.frames(), self.table(), self.segments()
        train_frames, _ = self.split(frames, spec)
        if [f.index for f in train_frames] != seg.frame_indices:
            raise StageError("stale-input", "segments do not match the training frames; rerun segment")
        bank = extract_all(seg, train_frames, spec, table, self.cfg.corruption, self.cfg.seed)
        bank.write(self._dir("features"))

    def aggregate(self) -> None:
        bank = self.bank()
        a = self.cfg.aggregation
        results = aggregation.aggregate_bank(bank, a.k, a.rule, a.weight)
        aggregation.write_results(self._dir("aggregate"), bank, results)

    def train_init(self) -> None:
        spec, frames = self.spec(), self.frames()
        train_frames, _ = self.split(frames, spec)
        extent = spec.extent()
        g0 = self._init_gaussians(spec, 0)
        tc = self.cfg.train
        field, temp, losses = transient.train_init(
            train_frames, g0, Background.make(spec.background, None, 0), self.cfg.transient,
            tc.learning_rates(extent), tc.lr_position_final * extent,
        )
        d = self._dir("transient")
        d.mkdir(parents=True, exist_ok=True)
        storage.write_map(d / "initial_maps.estf", field.maps())
        storage.write_tensor(d / "latents.estf", field.latents)
        storage.write_csv(d / "init_loss.csv", ["iteration", "frame", "loss"], _loss_rows(losses))
        if self.cfg.continue_from_init:
            save_checkpoint(d / "temporary_checkpoint", temp, self.cfg.transient.iterations)

    def initial_maps(self) -> np.ndarray:
        path = _require(self._dir("transient") / "initial_maps.estf", "initial transient maps (run train-init)")
        return storage.read_tensor(path).astype(np.float64)

    def refine(self) -> None:
        seg, maps = self.segments(), self.initial_maps()
        if maps.shape != seg.id_maps.shape:
            raise StageError("stale-input", "transient maps do not align with segments; rerun train-init")
        ratios = transient.transient_ratios(seg, maps)
        chosen = {i for i, r in ratios.items() if r >= self.cfg.transient_threshold}
        refined = transient.refine_masks(chosen, seg)
        transient.write_refined(self._dir("transient"), refined, ratios, chosen)

    def refined_masks(self) -> np.ndarray:
        _require(self._dir("transient") / "refined_masks.estf", "refined transient masks (run refine)")
        return transient.read_refined(self._dir("transient"))[0]

    def _targets(self, aggregated: bool) -> np.ndarray:
        bank = self.bank()
        if not aggregated:
            return aggregation.target_features(bank, None)
        path = _require(self._dir("aggregate") / "targets.estf", "aggregated targets (run aggregate)")
        return storage.read_tensor(path).astype(np.float64)

    def _init_gaussians(self, spec: SceneSpec, feature_dim: int) -> GaussianSet:
        return init_gaussians(spec, self.cfg.points_per_object, self.cfg.background_fraction,
                              feature_dim=feature_dim, seed=self.cfg.seed, opacity=self.cfg.init_opacity)

    def _start(self, spec: SceneSpec, dim: int) -> GaussianSet:
        if not self.cfg.continue_from_init:
            return self._init_gaussians(spec, dim)
        temp, _ = load_checkpoint(_require(self._dir("transient") / "temporary_checkpoint",
                                           "temporary checkpoint (run train-init with continue_from_init)"))
        temp.features = np.zeros((len(temp), dim))
        return temp

    def _fit(self, aggregated: bool, weights: Optional[np.ndarray]) -> TrainResult:
        spec, frames, table, seg = self.spec(), self.frames(), self.table(), self.segments()
        train_frames, _ = self.split(frames, spec)
        bank = self.bank()
        fmaps = aggregation.build_feature_maps(seg, bank.instance_ids, self._targets(aggregated), table.background)
        return train(train_frames, fmaps, weights, self._start(spec, table.dim),
                     self.background(table, spec), self.cfg.train, spec.extent())

    def train(self) -> None:
        result = self._fit(True, self.refined_masks().astype(np.float64))
        d = self._dir("train")
        save_checkpoint(d / "checkpoint", result.gaussians, self.cfg.train.iterations)
        storage.write_csv(d / "loss.csv", ["iteration", "frame", "loss"], _loss_rows(result.losses))

    def checkpoint(self, directory: Optional[Path] = None) -> GaussianSet:
        directory = directory or self._dir("train") / "checkpoint"
        if not (directory / "manifest.txt").exists():
            raise StageError("missing-input", f"missing checkpoint: {directory}")
        return load_checkpoint(directory)[0]

    def _render_heldout(self, g: GaussianSet):
        spec, frames, table = self.spec(), self.frames(), self.table()
        _, heldout = self.split(frames, spec)
        bg = self.background(table, spec)
        return heldout, pmap(lambda f: render(g, f.camera, bg), heldout)

    def render(self) -> None:
        g = self.checkpoint()
        heldout, outs = self._render_heldout(g)
        d = self._dir("render")
        for f, o in zip(heldout, outs):
            fd = d / f"frame_{f.index:04d}"
            fd.mkdir(parents=True, exist_ok=True)
            storage.write_ppm(fd / "rgb.ppm", o.rgb)
            storage.write_tensor(fd / "rgb.estf", o.rgb)
            storage.write_tensor(fd / "features.estf", o.features)

    def queries(self, spec: SceneSpec) -> list[str]:
        return list(self.cfg.queries) if self.cfg.queries else sorted(set(spec.categories()))

    def _evaluate(self, g: GaussianSet):
        spec, table = self.spec(), self.table()
        heldout, outs = self._render_heldout(g)
        cats = {o.id: o.category for o in spec.objects}
        dynamic = {o.category for o in spec.transient_objects}
        summary, rels = query.evaluate(
            [o.features for o in outs], [f.index for f in heldout], [f.instance_id for f in heldout],
            self.queries(spec), table, cats, dynamic, self.cfg.segment_threshold,
        )
        static_psnr = [psnr(f.rgb, o.rgb, ~f.transient_gt) for f, o in zip(heldout, outs)]
        return summary, rels, heldout, static_psnr

    def query(self) -> None:
        spec, table = self.spec(), self.table()
        g = self.checkpoint()
        heldout, outs = self._render_heldout(g)
        d = self._dir("query")
        for q in self.queries(spec):
            try:
                e = table.encode(q)
            except KeyError as exc:
                raise StageError("bad-query", str(exc).strip("'\"")) from None
            for f, o in zip(heldout, outs):
                rel = query.relevancy_map(o.features, e, table.canonicals)
                query.write_relevancy(d, f.index, q, rel, heat=self.cfg.heat_maps)

    def eval(self) -> None:
        g = self.checkpoint()
        try:
            summary, _, heldout, static_psnr = self._evaluate(g)
        except query.QueryError as exc:
            raise StageError("bad-query", str(exc)) from None
        d = self._dir("eval")
        query.write_eval(d, summary)
        storage.write_csv(d / "psnr.csv", ["frame", "static_psnr"],
                          [(f.index, p) for f, p in zip(heldout, static_psnr)])

    def ablate(self) -> None:
        """Paired runs sharing seed and initialisation; the full model is the train checkpoint."""
        weights = {
            "base": (False, None),
            "aggregation": (True, None),
            "aggregation+init-transient": (True, self.initial_maps()),
        }
        main = self.checkpoint()
        d = self._dir("ablation")
        rows, summaries = [], {}
        for name in VARIANTS:
            if name == "aggregation+transient":
                g = main
            else:
                aggregated, w = weights[name]
                g = self._fit(aggregated, w).gaussians
                save_checkpoint(d / name / "checkpoint", g, self.cfg.train.iterations)
            summary, _, _, static_psnr = self._evaluate(g)
            query.write_eval(d / name, summary, name="eval")
            summaries[name] = summary
            t = summary.table()
            rows.append((name, *t["static"][:2], *t["dynamic"][:2], *t["all"][:2], float(np.mean(static_psnr))))
        storage.write_csv(
            d / "ablation.csv",
            ["config", "acc_static", "miou_static", "acc_dynamic", "miou_dynamic", "acc_all", "miou_all", "static_psnr"],
            rows,
        )
        (d / "ablation.txt").write_text(query.format_table(summaries), encoding="utf-8")

    # ------------------------------------------------------------ driver

    def stage_fn(self, name: str) -> Callable[[], None]:
        table = {
            "synth": self.synth, "segment": self.segment, "features": self.features,
            "aggregate": self.aggregate, "train-init": self.train_init, "refine": self.refine,
            "train": self.train, "render": self.render, "query": self.query, "eval": self.eval,
            "ablate": self.ablate,
        }
        if name not in table:
            raise StageError("bad-stage", f"unknown stage {name!r}")
        return table[name]

    def run(self, name: str) -> None:
        if name == "all":
            for stage in STAGES:
                if stage == "ablate" and not self.cfg.ablation:
                    continue
                self.run(stage)
            return
        log.info("stage %s", name)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stage_fn(name)()


def clean(out: str | Path) -> None:
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
