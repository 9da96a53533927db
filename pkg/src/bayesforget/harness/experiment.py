"""End-to-end pipeline: generate data, train, forget, retrain, certify, report.

Each phase is a method of :class:`Pipeline`.  With an output directory, every
phase writes its artifacts there and later phases reload what is missing from
memory, so the CLI can run the phases as separate processes.  Only the
``timings`` block of the report and the ``elapsed`` column of the metrics
depend on wall-clock time; everything else is a deterministic function of the
configuration.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..core import Dataset, RngStream
from ..errors import BayesForgetError
from ..forget import (
    ForgetRequest,
    fisher_estimate,
    forget_mcmc,
    forget_vi,
    generalization_bound,
    mcmc_certificate,
    pac_bayes_bound,
    vi_certificate,
)
from ..influence import buffer_draw_indices
from ..models import (
    LOG_2PI,
    BayesianClassifierModel,
    ConjugateGaussianMeanModel,
    EnergyModel,
    GmmModel,
)
from ..sgmcmc import SampleBuffer, load_buffer, run_chain, save_buffer
from ..vi import load_params, save_params, vi_train
from .config import ExperimentConfig, dumps_config
from .data import class_removal_indices, synth_gmm_data, synth_test_split

__all__ = [
    "Pipeline",
    "build_model",
    "run_experiment",
    "retrain_oracle",
    "matched_center_distance",
    "loss_matrix",
    "dumps_json",
    "TIMING_KEYS",
]

log = logging.getLogger(__name__)

TIMING_KEYS = ("timings",)
# the per-datum loss for density models is (h - floor) / LOSS_SPAN clipped to [0, 1]
LOSS_SPAN = 10.0


def dumps_json(obj) -> str:
    """Canonical JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def build_model(cfg: ExperimentConfig) -> EnergyModel:
    if cfg.model == "gmm":
        return GmmModel(cfg.n_components, cfg.dim, cfg.prior_std)
    if cfg.model == "conjugate":
        return ConjugateGaussianMeanModel(cfg.dim, cfg.prior_std)
    return BayesianClassifierModel(cfg.dim, cfg.n_components, cfg.hidden, cfg.prior_std)


def matched_center_distance(a, b, K: int) -> float:
    """Mean Euclidean distance between centre sets after optimal one-to-one matching."""
    A = np.asarray(a, dtype=np.float64).reshape(K, -1)
    B = np.asarray(b, dtype=np.float64).reshape(K, -1)
    cost = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def loss_matrix(model: EnergyModel, draws: np.ndarray, X: np.ndarray, y) -> np.ndarray:
    """Per-draw, per-datum loss in ``[0, 1]``, shape ``(m, n)``.

    Classifier: 0-1 error.  Density models: ``clip((h - floor) / 10, 0, 1)``
    where ``floor`` is the smallest value ``h`` can take (``(d/2) log 2 pi``
    for the GMM, 0 for the conjugate model with its constants dropped).
    """
    draws = np.atleast_2d(draws)
    if X.shape[0] == 0:
        return np.zeros((draws.shape[0], 0))
    if isinstance(model, BayesianClassifierModel):
        return np.array([(np.argmax(model.logits(t, X), axis=1) != y).astype(float) for t in draws])
    floor = 0.5 * model.dim_datum * LOG_2PI if isinstance(model, GmmModel) else 0.0
    return np.array([np.clip((model.h(t, X, y) - floor) / LOSS_SPAN, 0.0, 1.0) for t in draws])


def _state_kind(cfg: ExperimentConfig) -> str:
    return "vi" if cfg.inference == "vi" else "mcmc"


class Pipeline:
    """State and artifacts of one experiment."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Union[str, Path, None] = None):
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        self.model = build_model(cfg)
        self.S: Optional[Dataset] = None
        self.S_test: Optional[Dataset] = None
        self.removed: Optional[np.ndarray] = None
        self.original = None
        self.processed = None
        self.retrained = None
        self.S_minus: Optional[Dataset] = None
        self.audit: Optional[list] = None
        self.certificate = None
        self.timings: dict = {}
        self.forget_removed_reads: Optional[int] = None

    # -- artifact helpers ---------------------------------------------------
    def _path(self, name: str) -> Optional[Path]:
        return None if self.out is None else self.out / name

    def _write(self, name: str, text: str) -> None:
        p = self._path(name)
        if p is not None:
            p.write_text(text, encoding="utf-8")

    def _save_state(self, tag: str, state) -> None:
        if self.out is None:
            return
        if isinstance(state, SampleBuffer):
            save_buffer(state, self.out / f"samples_{tag}.json")
        else:
            save_params(self.out / f"params_{tag}.json", state, self.model.name, self.cfg.seed)

    def _load_state(self, tag: str):
        if self.out is None:
            raise FileNotFoundError(f"no in-memory {tag} state and no output directory")
        if _state_kind(self.cfg) == "mcmc":
            return load_buffer(self.out / f"samples_{tag}.json")
        lam, _ = load_params(self.out / f"params_{tag}.json", self.cfg.sigma_min, self.cfg.sigma_max)
        return lam

    def _record_timing(self, key: str, value: float) -> None:
        self.timings[key] = value
        p = self._path("timings.json")
        if p is None:
            return
        old = json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}
        old[key] = value
        p.write_text(dumps_json(old), encoding="utf-8")

    def _load_timings(self) -> None:
        p = self._path("timings.json")
        if p is not None and p.exists():
            for k, v in json.loads(p.read_text(encoding="utf-8")).items():
                self.timings.setdefault(k, v)

    # -- phases -------------------------------------------------------------
    def gen_data(self) -> Dataset:
        cfg = self.cfg
        self.S = synth_gmm_data(cfg.n, cfg.n_components, cfg.cluster_means, cfg.data_seed)
        self.S_test = synth_test_split(cfg.n_test, cfg.n_components, cfg.cluster_means, cfg.data_seed)
        self._write("config.toml", dumps_config(cfg))
        if self.out is not None:
            self.S.to_csv(self.out / "data.csv")
            self.S_test.to_csv(self.out / "test.csv")
        return self.S

    def _ensure_data(self) -> None:
        if self.S is not None:
            return
        p = self._path("data.csv")
        if p is not None and p.exists():
            self.S = Dataset.from_csv(p)
            tp = self._path("test.csv")
            self.S_test = Dataset.from_csv(tp) if tp.exists() else synth_test_split(
                self.cfg.n_test, self.cfg.n_components, self.cfg.cluster_means, self.cfg.data_seed
            )
        else:
            self.gen_data()

    def removal_indices(self) -> np.ndarray:
        self._ensure_data()
        if self.removed is None:
            if self.cfg.remove_indices:
                self.removed = np.asarray(self.cfg.remove_indices, dtype=np.int64)
            else:
                self.removed = class_removal_indices(
                    self.S, self.cfg.remove_classes, self.cfg.remove_per_class
                )
        return self.removed

    def _fit(self, S: Dataset):
        cfg = self.cfg
        if cfg.inference == "vi":
            return vi_train(self.model, S, cfg.vi_config())
        return run_chain(self.model, S, cfg.chain_config(), cfg.inference)

    def train(self):
        self._ensure_data()
        t0 = time.perf_counter()
        self.original = self._fit(self.S)
        self._record_timing("train", time.perf_counter() - t0)
        self._save_state("original", self.original)
        return self.original

    def forget(self):
        self._ensure_data()
        if self.original is None:
            self.original = self._load_state("original")
        removed = self.removal_indices()
        req = ForgetRequest(tuple(removed.tolist()), self.cfg.forget_batch_size, self.cfg.influence_config())
        reads_before = self.S.audit.removed_reads
        op = forget_vi if _state_kind(self.cfg) == "vi" else forget_mcmc
        t0 = time.perf_counter()
        self.processed, self.S_minus, self.audit = op(
            self.original, self.model, self.S, req, record_states=True
        )
        self._record_timing("forget", time.perf_counter() - t0)
        self.forget_removed_reads = self.S.audit.removed_reads - reads_before
        self._save_state("processed", self.processed)
        self._write("audit.json", dumps_json(self._audit_json()))
        return self.processed

    def _audit_json(self) -> dict:
        return {
            "rows": self.audit,
            "removed_reads_during_forget": self.forget_removed_reads,
        }

    def retrain(self):
        removed = self.removal_indices()
        S_r = self.S.remove(removed)
        t0 = time.perf_counter()
        self.retrained = self._fit(S_r)
        self._record_timing("retrain", time.perf_counter() - t0)
        self._save_state("retrain", self.retrained)
        return self.retrained

    def _load_missing(self) -> None:
        self._ensure_data()
        self.removal_indices()
        if self.S_minus is None:
            self.S_minus = self.S.remove(self.removed)
        for tag, attr in (("original", "original"), ("processed", "processed"), ("retrain", "retrained")):
            if getattr(self, attr) is None:
                setattr(self, attr, self._load_state(tag))
        if self.audit is None:
            p = self._path("audit.json")
            rec = json.loads(p.read_text(encoding="utf-8"))
            self.audit = rec["rows"]
            self.forget_removed_reads = rec["removed_reads_during_forget"]
        self._load_timings()

    def certify(self):
        self._load_missing()
        cfg = self.cfg
        if _state_kind(cfg) == "vi":
            cert = vi_certificate(self.processed, self.retrained, cfg.sigma_min, cfg.sigma_max,
                                  n=self.S_minus.n_active)
        else:
            th1, th2 = self.processed.mean(), self.retrained.mean()
            J1 = self._fisher(th1, self.S_minus)
            J2 = self._fisher(th2, self.S_minus)
            caveat = "asymptotic-regime" if getattr(self.model, "multimodal", False) else None
            cert = mcmc_certificate(th1, th2, J1, J2, self.S_minus.n_active + 1, caveat=caveat)
        self.certificate = cert
        self._write("certificate.json", dumps_json(cert.to_json()))
        return cert

    def _fisher(self, theta, S: Dataset) -> np.ndarray:
        # the prior's curvature spread over the datums keeps J positive definite
        # when the likelihood alone is not identifiable (softmax logits)
        J = fisher_estimate(self.model, theta, S)
        prior = self.model.hess_f(theta)
        return J if prior is None else J + prior / S.n_active

    # -- evaluation ---------------------------------------------------------
    def _draws(self, state, m: int) -> np.ndarray:
        if isinstance(state, SampleBuffer):
            return state.samples[buffer_draw_indices(len(state), min(m, len(state)))]
        eps = RngStream(self.cfg.seed).spawn(99).standard_normal((m, state.dim))
        return state.mu[None, :] + state.sigma[None, :] * eps

    def _point(self, state) -> np.ndarray:
        return state.mean() if isinstance(state, SampleBuffer) else np.asarray(state.mu)

    def _split_losses(self, draws: np.ndarray) -> dict:
        removed = self.removed
        keep = np.setdiff1d(np.arange(self.S.n), removed)
        out = {}
        for name, (X, y) in (
            ("removed", (self.S.X[removed], None if self.S.y is None else self.S.y[removed])),
            ("remaining", (self.S.X[keep], None if self.S.y is None else self.S.y[keep])),
            ("test", (self.S_test.X, self.S_test.y)),
        ):
            if X.shape[0] == 0:
                out[name] = None
                continue
            y_model = y if isinstance(self.model, BayesianClassifierModel) else None
            out[name] = float(loss_matrix(self.model, draws, X, y_model).mean())
        return out

    def _distance(self, a, b) -> float:
        if isinstance(self.model, GmmModel):
            return matched_center_distance(a, b, self.model.K)
        return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))

    def _bounds(self) -> dict:
        cfg, S = self.cfg, self.S
        y = S.y if isinstance(self.model, BayesianClassifierModel) else None
        risk = float(loss_matrix(self.model, self._draws(self.processed, cfg.risk_draws), S.X, y).mean())
        n = S.n
        if _state_kind(cfg) == "vi":
            lam = self.original.flat
            D = lam - self.processed.flat
            proc = generalization_bound("vi", n=n, delta=cfg.bound_delta, empirical_risk=risk,
                                        lam=lam, delta_lam=D)
            base = generalization_bound("vi", n=n, delta=cfg.bound_delta, empirical_risk=risk,
                                        lam=lam, delta_lam=np.zeros_like(D))
            s0 = self.model.prior_std
            mu, sg = self.processed.mu, self.processed.sigma
            kl = float(np.sum(np.log(s0 / sg) + (sg**2 + mu**2) / (2 * s0**2) - 0.5))
            generic = pac_bayes_bound(kl, n, cfg.bound_delta, risk)
            out = {"processed": proc.to_json(), "baseline": base.to_json(), "pac_bayes": generic.to_json()}
        else:
            theta = self.original.mean()
            D = self.processed.drift - self.original.drift
            J = self._fisher(theta, S)
            proc = generalization_bound("mcmc", n=n, delta=cfg.bound_delta, empirical_risk=risk,
                                        theta=theta, delta_theta=D, J=J)
            base = generalization_bound("mcmc", n=n, delta=cfg.bound_delta, empirical_risk=risk,
                                        theta=theta, delta_theta=np.zeros_like(D), J=J)
            out = {"processed": proc.to_json(), "baseline": base.to_json()}
        out["increment"] = out["processed"]["bound"] - out["baseline"]["bound"]
        return out

    def _batch_state(self, row):
        """Parameters after an audited batch, as a single-draw array."""
        state = np.asarray(row["state"], dtype=np.float64)
        if _state_kind(self.cfg) == "vi":
            return state[: self.model.dim_param][None, :]
        return (self.original.mean() - state)[None, :]

    def metrics_csv(self) -> str:
        """One row per forget batch; errors evaluated at the posterior mean after the batch."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch", "n_active", "influence_norm", "c", "spectral_norm",
                    "err_removed", "err_remaining", "err_test", "elapsed"])
        for row in self.audit:
            errs = self._split_losses(self._batch_state(row))
            w.writerow([
                row["batch"], row["n_active"], repr(row["influence_norm"]), repr(row["c"]),
                repr(row["spectral_norm"]),
                *(("" if errs[k] is None else repr(errs[k])) for k in ("removed", "remaining", "test")),
                repr(row.get("elapsed", float("nan"))),
            ])
        return buf.getvalue()

    def report(self) -> dict:
        self._load_missing()
        if self.certificate is None:
            self.certify()
        cfg = self.cfg
        orig_pt, proc_pt, ret_pt = (self._point(s) for s in (self.original, self.processed, self.retrained))
        errors = {
            tag: self._split_losses(self._draws(state, cfg.risk_draws))
            for tag, state in (("original", self.original), ("processed", self.processed),
                               ("retrain", self.retrained))
        }
        t = dict(self.timings)
        if t.get("train") and t.get("forget"):
            t["acceleration_rate"] = t["train"] / t["forget"]
        if t.get("retrain") and t.get("forget"):
            t["retrain_over_forget"] = t["retrain"] / t["forget"]
        spec = [r["spectral_norm"] for r in self.audit]
        rep = {
            "status": "ok",
            "config": cfg.to_dict(),
            "n": self.S.n,
            "n_removed": int(self.removed.size),
            "n_remaining": int(self.S.n - self.removed.size),
            "timings": t,
            "distances": {
                "metric": "matched-center" if isinstance(self.model, GmmModel) else "euclidean",
                "original_retrain": self._distance(orig_pt, ret_pt),
                "processed_retrain": self._distance(proc_pt, ret_pt),
            },
            "certificate": self.certificate.to_json(),
            "bounds": self._bounds(),
            "errors": errors,
            "forget_audit": {
                "batches": len(self.audit),
                "max_spectral_norm": max(spec) if spec else None,
                "removed_reads_during_forget": self.forget_removed_reads,
                "damping": cfg.damping,
            },
        }
        self._write("report.json", dumps_json(rep))
        self._write("metrics.csv", self.metrics_csv())
        return rep


def retrain_oracle(cfg: ExperimentConfig, removed, S: Optional[Dataset] = None):
    """Train from scratch on ``S`` minus ``removed`` with the configured seed."""
    pipe = Pipeline(cfg)
    pipe.S = S if S is not None else synth_gmm_data(cfg.n, cfg.n_components, cfg.cluster_means,
                                                      cfg.data_seed)
    return pipe._fit(pipe.S.remove(np.asarray(removed, dtype=np.int64)))


PHASES = ("gen_data", "train", "forget", "retrain", "certify", "report")


def run_experiment(cfg: ExperimentConfig, out_dir: Union[str, Path, None] = None) -> dict:
    """Run every phase; on failure return (and write) a partial report with a failure marker."""
    pipe = Pipeline(cfg, out_dir)
    for phase in PHASES:
        try:
            result = getattr(pipe, phase)()
        except (BayesForgetError, ValueError, np.linalg.LinAlgError) as exc:
            log.error("phase %s failed: %s", phase, exc)
            rep = {
                "status": "failed",
                "failed_phase": phase,
                "error": f"{type(exc).__name__}: {exc}",
                "config": cfg.to_dict(),
                "timings": dict(pipe.timings),
            }
            pipe._write("report.json", dumps_json(rep))
            return rep
    return result
