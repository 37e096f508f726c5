"""
Experiment orchestrator: corpus generation, training, prototype estimation
and evaluation, each as one idempotent command over an output directory.

    <out>/config.ini
    <out>/corpus/<domain>__<split>/...
    <out>/seed_<s>/checkpoint.dgpm | loss_history.csv | prototypes.dgpc
    <out>/results/eval.csv | ablation.csv
"""

import csv
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime

import numpy as np
import torch

from config.experiment_config import save_config
from config.settings import worker_count
from modules.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from modules.dataset_store import load_benchmark, save_benchmark
from modules.dg_engine import SHIFT_MODES, DGInferenceEngine, estimate_source_state, pairs_by_id
from modules.domains import build_benchmark, derive_seed
from modules.errors import NumericError, ResolutionError, StalenessError, UsageError
from modules.geometry import chamfer_distance
from modules.mpm_model import build_model
from modules.prototype_store import load_prototypes, save_prototypes
from modules.results import ResultRow, ResultTable
from modules.trainer import train

logger = logging.getLogger("Experiment")

BASELINE_MODE = "baseline-copy-prompt"


class Experiment:
    def __init__(self, config):
        logger.info("🚀 Booting DG-PIC experiment")
        self.config = config.validate()
        self.out_dir = config.out_dir
        self.stats = {
            "pairs_generated": 0,
            "models_trained": 0,
            "stores_written": 0,
            "rows_evaluated": 0,
            "last_success": None,
        }
        torch.set_num_threads(worker_count())

    # ----- paths -----
    @property
    def corpus_dir(self):
        return os.path.join(self.out_dir, "corpus")

    @property
    def results_dir(self):
        return os.path.join(self.out_dir, "results")

    def seed_dir(self, seed):
        return os.path.join(self.out_dir, f"seed_{seed}")

    def checkpoint_path(self, seed):
        return os.path.join(self.seed_dir(seed), "checkpoint.dgpm")

    def loss_path(self, seed):
        return os.path.join(self.seed_dir(seed), "loss_history.csv")

    def store_path(self, seed):
        return os.path.join(self.seed_dir(seed), "prototypes.dgpc")

    def _seeds(self, seeds):
        return tuple(seeds) if seeds else tuple(self.config.seeds)

    def _done(self):
        self.stats["last_success"] = datetime.now().isoformat()

    # ----- corpus -----
    def cmd_gen_data(self, force=False):
        if os.path.isdir(self.corpus_dir) and os.listdir(self.corpus_dir):
            if not force:
                raise UsageError(f"{self.corpus_dir} already exists; pass --force to rebuild it")
            logger.warning(f"⚠️ Removing existing corpus at {self.corpus_dir}")
            shutil.rmtree(self.corpus_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        save_config(self.config, os.path.join(self.out_dir, "config.ini"))

        bench = build_benchmark(self.config.benchmark)
        save_benchmark(bench, self.corpus_dir)
        self.stats["pairs_generated"] = sum(len(ds) for ds in bench.all_datasets())
        self._done()
        logger.info(f"✅ Corpus of {self.stats['pairs_generated']} pairs written to {self.corpus_dir}")
        return bench

    def load_corpus(self):
        if not os.path.isdir(self.corpus_dir):
            raise ResolutionError(f"no corpus at {self.corpus_dir}; run gen-data first", missing_id="corpus")
        b = self.config.benchmark
        return load_benchmark(self.corpus_dir, b.sources, b.target)

    # ----- training -----
    def cmd_train(self, seeds=None):
        bench = self.load_corpus()
        digests = {}
        for seed in self._seeds(seeds):
            cfg = self.config.model.with_overrides(seed=seed)
            logger.info(f"🚀 Training seed {seed}")
            model, history = train(build_model(cfg), bench.source, cfg)
            os.makedirs(self.seed_dir(seed), exist_ok=True)
            digests[seed] = save_checkpoint(model, self.checkpoint_path(seed))
            with open(self.loss_path(seed), "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(("epoch", "mean_loss", "learning_rate"))
                for rec in history:
                    writer.writerow((rec.epoch, repr(rec.mean_loss), repr(rec.learning_rate)))
            self.stats["models_trained"] += 1
        self._done()
        return digests

    def load_model(self, seed):
        path = self.checkpoint_path(seed)
        if not os.path.exists(path):
            raise ResolutionError(f"no checkpoint for seed {seed} at {path}; run train first", missing_id=path)
        return load_checkpoint(path)

    # ----- prototypes -----
    def cmd_estimate_prototypes(self, seeds=None, force=False):
        bench = self.load_corpus()
        for seed in self._seeds(seeds):
            model = self.load_model(seed)
            digest = checkpoint_hash(model)
            store = self.store_path(seed)
            if os.path.exists(store) and not force:
                # raises StalenessError when the checkpoint changed underneath the store
                load_prototypes(store, expected_hash=digest)
                logger.info(f"ℹ️ Prototype store for seed {seed} is up to date")
                continue
            protos, bank = estimate_source_state(bench.source, model, self.config.engine.prototype_scope)
            save_prototypes(protos, bank, store)
            self.stats["stores_written"] += 1
        self._done()

    # ----- evaluation -----
    def engine(self, seed, bench):
        model = self.load_model(seed)
        store = self.store_path(seed)
        if not os.path.exists(store):
            raise ResolutionError(f"no prototype store for seed {seed}; run estimate-prototypes first",
                                  missing_id=store)
        protos, bank = load_prototypes(store, expected_hash=checkpoint_hash(model))
        e = self.config.engine
        return DGInferenceEngine(
            model, protos, bank, pairs_by_id(bench.source),
            lam=e.lam,
            negate_distances=e.negate_distances,
            prompt_selection=e.prompt_selection,
            n_points=self.config.benchmark.n_points,
        )

    def self_check(self, bench):
        for pair in bench.target.all_pairs():
            cd = chamfer_distance(pair.target, pair.target)
            if cd != 0.0:
                raise NumericError(f"self-check failed: CD(target, target) = {cd} for sample {pair.sample_id}")
        logger.info(f"✅ Self-check passed on {len(bench.target)} target pairs")

    def _score(self, engine, mode, task, pairs, seed):
        def one(pair):
            sample_seed = derive_seed(seed, mode, task, pair.sample_id)
            if mode == BASELINE_MODE:
                pred = engine.copy_prompt(pair.input, task, sample_seed)
            else:
                pred = engine.infer(pair.input, task, mode, sample_seed)
            return chamfer_distance(pred, pair.target)

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            scores = list(pool.map(one, pairs))
        return float(np.mean(scores))

    def evaluate(self, modes, seeds=None, self_check=False, baseline=None):
        for mode in modes:
            if mode not in SHIFT_MODES:
                raise UsageError(f"unknown mode '{mode}'; valid modes: {', '.join(SHIFT_MODES)}")
        bench = self.load_corpus()
        if self_check:
            self.self_check(bench)
        baseline = self.config.baseline if baseline is None else baseline
        run_modes = [*modes, BASELINE_MODE] if baseline else list(modes)
        limit = self.config.max_eval_samples

        table = ResultTable()
        for seed in self._seeds(seeds):
            engine = self.engine(seed, bench)
            for mode in run_modes:
                for task in self.config.benchmark.tasks:
                    pairs = bench.target.pairs_for(task)
                    pairs = pairs[:limit] if limit else pairs
                    mean_cd = self._score(engine, mode, task, pairs, seed)
                    table.add(ResultRow(mode, task, seed, mean_cd, len(pairs)))
                    logger.info(f"📊 seed={seed} mode={mode} task={task} CD={mean_cd * 1e3:.1f}e-3")
        self.stats["rows_evaluated"] += len(table.rows)
        self._done()
        return table, run_modes

    def _report(self, table, run_modes, name):
        os.makedirs(self.results_dir, exist_ok=True)
        path = os.path.join(self.results_dir, f"{name}.csv")
        table.to_csv(path, run_modes, self.config.benchmark.tasks)
        rendered = table.render(run_modes, self.config.benchmark.tasks)
        print(rendered)
        logger.info(f"💾 Results written to {path}")
        return path

    def cmd_eval(self, modes=None, seeds=None, self_check=False, baseline=None):
        table, run_modes = self.evaluate(modes or self.config.modes, seeds, self_check, baseline)
        self._report(table, run_modes, "eval")
        return table

    def cmd_ablate(self, seeds=None, self_check=False, baseline=None):
        table, run_modes = self.evaluate(SHIFT_MODES, seeds, self_check, baseline)
        self._report(table, run_modes, "ablation")
        return table

    def stale_check(self, seed):
        """True when the stored prototypes match the current checkpoint."""
        try:
            load_prototypes(self.store_path(seed), expected_hash=checkpoint_hash(self.load_model(seed)))
            return True
        except StalenessError:
            return False
