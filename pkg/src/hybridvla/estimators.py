"""scikit-learn style wrappers around the data, SFT and RL stages."""
from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation as V
from .data import demo_to_records
from .env import default_suite
from .eval import EvalConfig, evaluate
from .model import ModelConfig, PolicySnapshot
from .rl import GrpoConfig, RewardConfig, train_rl
from .rollout import ModelPolicy
from .sft import SftConfig, fit_snapshot
from .vocab import build_vocab


class CotAnnotator(BaseEstimator, TransformerMixin):
    """Expert demos -> CoT records (keyframe annotation plus propagation)."""

    def __init__(self, n_bins=256, max_cot_len=24):
        self.n_bins = n_bins
        self.max_cot_len = max_cot_len

    def fit(self, X=None, y=None):
        V.check_positive_int(self.n_bins, "n_bins")
        V.check_positive_int(self.max_cot_len, "max_cot_len")
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        records = []
        for demo in V.check_demos(X):
            recs, _ = demo_to_records(demo, self.n_bins, self.max_cot_len)
            records.extend(recs)
        return records


class HybridCoTPolicy(BaseEstimator):
    """Supervised hybrid-attention policy.

    ``fit`` takes CoT records, ``predict`` maps ``(state, task)`` pairs to
    action chunks of shape ``(n, h, d)``, ``score`` is the greedy suite
    success rate.
    """

    def __init__(self, layers=2, heads=4, model_dim=64, h=5, d=3, n_bins=256, max_cot_len=24,
                 prefix_attention="bidirectional", steps=6000, batch_size=32, learning_rate=1e-3,
                 cot_dropout=0.25, warmup_steps=100, seed=0, suite=None):
        self.layers = layers
        self.heads = heads
        self.model_dim = model_dim
        self.h = h
        self.d = d
        self.n_bins = n_bins
        self.max_cot_len = max_cot_len
        self.prefix_attention = prefix_attention
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cot_dropout = cot_dropout
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.suite = suite

    def _model_config(self):
        return ModelConfig(layers=self.layers, heads=self.heads, model_dim=self.model_dim, h=self.h, d=self.d,
                           n_bins=self.n_bins, max_cot_len=self.max_cot_len,
                           prefix_attention=self.prefix_attention)

    def fit(self, X, y=None):
        records = V.check_records(X)
        V.check_positive_int(self.steps, "steps")
        V.check_probability(self.cot_dropout, "cot_dropout")
        suite = self.suite or default_suite()
        cfg = SftConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, steps=self.steps,
                        seed=self.seed, model=self._model_config(), cot_dropout=self.cot_dropout,
                        warmup_steps=self.warmup_steps, log_every=max(self.steps // 10, 1))
        self.snapshot_, self.history_ = fit_snapshot(records, build_vocab(suite, self.n_bins), cfg)
        return self

    @classmethod
    def from_snapshot(cls, snapshot, **kw):
        c = snapshot.config
        est = cls(layers=c.layers, heads=c.heads, model_dim=c.model_dim, h=c.h, d=c.d, n_bins=c.n_bins,
                  max_cot_len=c.max_cot_len, prefix_attention=c.prefix_attention, **kw)
        est.snapshot_ = snapshot
        est.history_ = []
        return est

    def predict(self, X, cot_mode="full"):
        check_is_fitted(self, "snapshot_")
        states, tasks = V.check_state_task_pairs(X)
        policy = ModelPolicy(self.snapshot_, 0.0, cot_mode, random_cot_len=8, seed=self.seed)
        return np.stack([vals for _, vals in policy.act(states, tasks)])

    def predict_cot(self, X):
        """Decoded greedy CoT strings, one per pair."""
        check_is_fitted(self, "snapshot_")
        states, tasks = V.check_state_task_pairs(X)
        policy = ModelPolicy(self.snapshot_, 0.0, "full", seed=self.seed)
        return [" ".join(self.snapshot_.vocab.decode(rec.cot)) for rec, _ in policy.act(states, tasks)]

    def score(self, X=None, y=None, n_conditions=20):
        """Greedy success rate on ``X`` (a suite) or the estimator's suite."""
        check_is_fitted(self, "snapshot_")
        suite = X if X is not None else (self.suite or default_suite())
        return evaluate(self.snapshot_, EvalConfig(n_conditions, self.seed, suite=suite)).suite_sr


class GrpoFineTuner(BaseEstimator):
    """Group-relative RL fine-tuning of a fitted :class:`HybridCoTPolicy` or snapshot."""

    def __init__(self, G=8, eps_low=0.2, eps_high=0.28, beta=0.01, temperature=1.0, minibatch_size=40,
                 epochs=2, iterations=20, learning_rate=1e-4, alpha_s=1.0, alpha_f=0.1, seed=0, suite=None):
        self.G = G
        self.eps_low = eps_low
        self.eps_high = eps_high
        self.beta = beta
        self.temperature = temperature
        self.minibatch_size = minibatch_size
        self.epochs = epochs
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.alpha_s = alpha_s
        self.alpha_f = alpha_f
        self.seed = seed
        self.suite = suite

    def config(self):
        return GrpoConfig(G=self.G, eps_low=self.eps_low, eps_high=self.eps_high, beta=self.beta,
                          temperature=self.temperature, minibatch_size=self.minibatch_size, epochs=self.epochs,
                          iterations=self.iterations, learning_rate=self.learning_rate, seed=self.seed,
                          reward=RewardConfig(self.alpha_s, self.alpha_f))

    def fit(self, X, y=None, out_dir=None):
        if isinstance(X, HybridCoTPolicy):
            check_is_fitted(X, "snapshot_")
            X = X.snapshot_
        if not isinstance(X, PolicySnapshot):
            raise TypeError("fit expects a fitted HybridCoTPolicy or a PolicySnapshot")
        suite = self.suite or default_suite()
        with tempfile.TemporaryDirectory() as tmp:
            self.snapshot_, self.history_ = train_rl(self.config(), None, out_dir or tmp, suite, init_snapshot=X)
        return self

    def to_policy(self):
        check_is_fitted(self, "snapshot_")
        return HybridCoTPolicy.from_snapshot(self.snapshot_, seed=self.seed, suite=self.suite)
