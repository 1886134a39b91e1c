"""Pipeline stages over an output directory.

Each stage reads the artifacts of earlier stages from ``cfg.out_dir``,
checks that they were produced under the same config hash, and writes its
own artifacts atomically. Layout::

    config.yaml
    data/pool.tsv  data/quantify.tsv  data/downstream.tsv  data/images/
    meta/model.ckpt  meta/metrics.tsv
    loop/round{r}.ckpt  loop/metrics_round{r}.tsv  loop/refinement.tsv  loop/final_pool.tsv
    quantify/report.tsv
    downstream/model.ckpt  downstream/results.tsv
    ablate/results.tsv  ablate/report.tsv  ablate/report.txt
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import PipelineConfig, save_config
from .data import DataPool, carve_quantify, inject_noise, read_manifest, write_images, write_manifest
from .downstream import append_result, build_model, finetune
from .errors import DataError
from .fileio import atomic_write_text
from .maml import MetaModel, meta_train, write_metrics
from .network import load_feature_net, save_feature_net
from .quantify import QuantifyResult, QuantifyRow, quantify, write_quantify_report
from .refinement import refinement_loop, write_refinement_report
from .report import ReportRow, render_table, write_report_records
from .rng import stream
from .synthetic import DownstreamSet, generate, read_downstream, write_downstream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def pool(self) -> Path:
        return self.root / "data" / "pool.tsv"

    @property
    def quantify_pool(self) -> Path:
        return self.root / "data" / "quantify.tsv"

    @property
    def downstream_set(self) -> Path:
        return self.root / "data" / "downstream.tsv"

    @property
    def meta_model(self) -> Path:
        return self.root / "meta" / "model.ckpt"

    @property
    def meta_metrics(self) -> Path:
        return self.root / "meta" / "metrics.tsv"

    def round_model(self, r: int) -> Path:
        return self.root / "loop" / f"round{r}.ckpt"

    def round_metrics(self, r: int) -> Path:
        return self.root / "loop" / f"metrics_round{r}.tsv"

    @property
    def refinement_report(self) -> Path:
        return self.root / "loop" / "refinement.tsv"

    @property
    def final_pool(self) -> Path:
        return self.root / "loop" / "final_pool.tsv"

    @property
    def quantify_report(self) -> Path:
        return self.root / "quantify" / "report.tsv"

    @property
    def downstream_model(self) -> Path:
        return self.root / "downstream" / "model.ckpt"

    @property
    def downstream_results(self) -> Path:
        return self.root / "downstream" / "results.tsv"

    @property
    def ablate_results(self) -> Path:
        return self.root / "ablate" / "results.tsv"

    @property
    def ablate_report(self) -> Path:
        return self.root / "ablate" / "report.tsv"

    @property
    def ablate_table(self) -> Path:
        return self.root / "ablate" / "report.txt"


def _check_hash(cfg: PipelineConfig, path: Path, found: str) -> None:
    if found != cfg.hash():
        raise DataError(f"{path} was produced under config {found or '<none>'}, "
                        f"current config is {cfg.hash()}; re-run the earlier stages")


def _header_hash(path: Path) -> str:
    if not path.exists():
        raise DataError(f"missing input {path}")
    first = path.read_text().split("\n", 1)[0]
    for item in first.split():
        if item.startswith("config_hash="):
            return item.split("=", 1)[1]
    return ""


# -- gen-data --------------------------------------------------------------------

def gen_data(cfg: PipelineConfig) -> tuple[DataPool, DataPool, DownstreamSet]:
    """Render the dataset, inject label noise into M, then hold out the quantify pool."""
    lay = Layout(Path(cfg.out_dir))
    save_config(lay.config, cfg)
    pool, downstream = generate(cfg.generator_spec())
    pool = inject_noise(pool, cfg.data.noise_rate, stream(cfg.seed, "noise"))
    pool, held = carve_quantify(pool, cfg.fuse.quantify_fraction, stream(cfg.seed, "quantify", "carve"))
    image_dir = lay.pool.parent / "images"
    write_images(pool.samples + held.samples, image_dir)
    write_manifest(lay.pool, pool, "images", cfg.hash())
    write_manifest(lay.quantify_pool, held, "images", cfg.hash())
    write_downstream(lay.downstream_set, downstream, Path("images"), cfg.hash())
    return pool, held, downstream


def _load_pool(cfg: PipelineConfig, path: Path) -> DataPool:
    if not path.exists():
        raise DataError(f"missing input {path}; run gen-data first")
    pool, found = read_manifest(path)
    _check_hash(cfg, path, found)
    return pool


def _load_downstream(cfg: PipelineConfig, path: Path) -> DownstreamSet:
    if not path.exists():
        raise DataError(f"missing input {path}; run gen-data first")
    dset, found = read_downstream(path)
    _check_hash(cfg, path, found)
    return dset


# -- meta-train / refine-loop ----------------------------------------------------

def _save_model(cfg: PipelineConfig, path: Path, model: MetaModel) -> None:
    save_feature_net(path, model.net, {"config_hash": cfg.hash(), "round": model.round})


def _load_model(cfg: PipelineConfig, path: Path) -> MetaModel:
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    net, meta = load_feature_net(path)
    _check_hash(cfg, path, meta.get("config_hash", ""))
    return MetaModel(net, int(meta.get("round", 0)))


def meta_train_stage(cfg: PipelineConfig) -> MetaModel:
    lay = Layout(Path(cfg.out_dir))
    pool = _load_pool(cfg, lay.pool)
    model = meta_train(pool, cfg.train, cfg.seed)
    _save_model(cfg, lay.meta_model, model)
    write_metrics(lay.meta_metrics, model, cfg.hash())
    return model


def refine_loop_stage(cfg: PipelineConfig, m: int | None = None):
    lay = Layout(Path(cfg.out_dir))
    pool = _load_pool(cfg, lay.pool)
    m = cfg.m if m is None else m

    def persist(r: int, model: MetaModel, _pool: DataPool) -> None:
        _save_model(cfg, lay.round_model(r), model)
        write_metrics(lay.round_metrics(r), model, cfg.hash())

    result = refinement_loop(pool, m, cfg.train, cfg.refine, cfg.seed, on_round=persist)
    write_refinement_report(lay.refinement_report, result.reports, cfg.hash())
    write_manifest(lay.final_pool, result.pool, Path("..") / "data" / "images", cfg.hash())
    return result


def load_round_models(cfg: PipelineConfig, m: int) -> list[MetaModel]:
    lay = Layout(Path(cfg.out_dir))
    return [_load_model(cfg, lay.round_model(r)) for r in range(m)]


# -- quantify --------------------------------------------------------------------

def run_quantify(cfg: PipelineConfig, models: list[MetaModel], pool: DataPool, held: DataPool,
                 n: int) -> QuantifyResult:
    """Select n of the given candidates; a single candidate is passed through."""
    if len(models) == 1:
        only = models[0]
        return QuantifyResult([only], [QuantifyRow(only.round, 0.0, 0.0, 0.0, True)])
    return quantify(models, pool, replace(cfg.fuse, n=n), held, cfg.train.ways, cfg.train.update_shots,
                    cfg.train.inner_lr, stream(cfg.seed, "quantify", "tasks"), cfg.train.inner_steps)


def quantify_stage(cfg: PipelineConfig) -> QuantifyResult:
    lay = Layout(Path(cfg.out_dir))
    pool = _load_pool(cfg, lay.pool)
    held = _load_pool(cfg, lay.quantify_pool)
    models = load_round_models(cfg, cfg.m)
    result = run_quantify(cfg, models, pool, held, min(cfg.fuse.n, cfg.m))
    write_quantify_report(lay.quantify_report, result, cfg.hash())
    return result


def read_selected(cfg: PipelineConfig) -> list[int]:
    """Selected rounds from the quantify report, in selection order (descending S_F)."""
    lay = Layout(Path(cfg.out_dir))
    path = lay.quantify_report
    _check_hash(cfg, path, _header_hash(path))
    rows = []
    for line in path.read_text().splitlines():
        if line.startswith("#") or not line:
            continue
        r, _, _, fuse, selected = line.split("\t")
        if selected == "1":
            rows.append((-float(fuse), int(r)))
    return [r for _, r in sorted(rows)]


# -- downstream ------------------------------------------------------------------

def run_downstream(cfg: PipelineConfig, models: list[MetaModel], dset: DownstreamSet):
    model = build_model([mm.net for mm in models], dset.question_types, dset.num_answers,
                        stream(cfg.seed, "downstream", "init"))
    result = finetune(model, dset, cfg.downstream, stream(cfg.seed, "downstream", "order"))
    return result


def train_downstream_stage(cfg: PipelineConfig):
    lay = Layout(Path(cfg.out_dir))
    dset = _load_downstream(cfg, lay.downstream_set)
    rounds = read_selected(cfg)
    models = [_load_model(cfg, lay.round_model(r)) for r in rounds]
    result = run_downstream(cfg, models, dset)
    save_checkpoint(lay.downstream_model, {k: v.data for k, v in result.model.parameters().items()},
                    {"config_hash": cfg.hash(), "rounds": ",".join(map(str, rounds))})
    append_result(lay.downstream_results, cfg.hash(), cfg.m, len(models), cfg.seed, result)
    return result


# -- ablate ----------------------------------------------------------------------

def ablate(cfg: PipelineConfig) -> list[ReportRow]:
    """One refinement loop of max(m) rounds serves every (m, n) cell: the first m
    rounds of a longer loop are exactly the m-round loop."""
    lay = Layout(Path(cfg.out_dir))
    if not lay.pool.exists():
        gen_data(cfg)
    pool = _load_pool(cfg, lay.pool)
    held = _load_pool(cfg, lay.quantify_pool)
    dset = _load_downstream(cfg, lay.downstream_set)
    pairs = cfg.ablate.pairs()
    loop = refine_loop_stage(cfg, max(m for m, _ in pairs))
    lay.ablate_results.unlink(missing_ok=True)
    rows = []
    for m, n in pairs:
        started = time.perf_counter()
        chosen = run_quantify(cfg, loop.models[:m], pool, held, n).selected
        result = run_downstream(cfg, chosen, dset)
        train_time = sum(mm.train_seconds for mm in loop.models[:m]) + (time.perf_counter() - started)
        append_result(lay.ablate_results, cfg.hash(), m, n, cfg.seed, result)
        rows.append(ReportRow(m, n, repr(result.test_acc), f"{train_time:.1f}",
                              str(result.model.param_count())))
        log.info("ablate m=%d n=%d test accuracy %.4f", m, n, result.test_acc)
    write_report_records(lay.ablate_report, rows, cfg.hash())
    atomic_write_text(lay.ablate_table, render_table(rows))
    return rows


def full_pipeline(cfg: PipelineConfig):
    gen_data(cfg)
    meta_train_stage(cfg)
    refine_loop_stage(cfg)
    quantify_stage(cfg)
    return train_downstream_stage(cfg)
