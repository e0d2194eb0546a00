"""Trainable approximator of the success-rate function, with from-scratch gradients.

The network scores a (condition, prefix) pair and emits one success-rate
estimate per vocabulary entry -- the estimate for appending that token -- plus
a learned scalar for the empty prefix.  Inputs are a condition embedding, the
embeddings of the last ``context_window`` tokens (left-padded), and a position
embedding; a small tanh MLP feeds a per-vocab sigmoid head.  The output head
and the empty-prefix logits start at zero, so a fresh model predicts 0.5
everywhere and composing it with a base model reproduces the base model.

Everything is plain numpy with analytic gradients; ``grad_check`` compares
them against central finite differences.  Training data comes from base-model
samples labeled by the oracle, optionally drawn with temperature smoothing or
from a guided proposal with importance reweighting; both modes self-normalize
their weights within each condition so the weighted loss still estimates the
plain expected loss.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError, NonFiniteLossError
from .exact import SuccessRate
from .oracle import Oracle
from .seqmodel import Sequence, TabularBaseModel, Window

EPS_CLAMP = 1e-6


class WarmupSkippedWarning(UserWarning):
    """Emitted when warmup is requested but no positive examples exist."""


# ---------------------------------------------------------------------------
# configuration and data containers


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for sampling and optimizing the rate network."""

    lam: float = 0.1
    lr: float = 2e-5
    epochs: int = 10
    batch_size: int = 0  # 0 = full batch
    samples_per_x: int = 64
    temperature: float = 1.0
    importance_sampling: bool = False
    proposal_refresh_period: int = 0  # epochs between proposal refreshes; 0 = never
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0.0:
            raise InvalidArgumentError("lam must be nonnegative")
        if self.temperature <= 0.0:
            raise InvalidArgumentError("temperature must be positive")
        if self.samples_per_x < 1:
            raise InvalidArgumentError("samples_per_x must be at least 1")
        if self.lr <= 0.0:
            raise InvalidArgumentError("learning rate must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise InvalidArgumentError("epoch counts must be nonnegative")


@dataclass(frozen=True)
class TrainingExample:
    """One sampled sequence with its oracle label and self-normalized weight."""

    x: str
    y: Sequence
    label: int
    log_weight: float
    weight: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight >= 0.0):
            raise InvalidArgumentError(f"weight must be finite and nonnegative: {self.weight}")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class RateNet(SuccessRate):
    """Per-vocab success-rate predictor over a fixed context window.

    Outputs are clamped to ``[eps, 1 - eps]`` so ratios and cross-entropy terms
    stay finite.  The forward pass is deterministic given the parameters.
    """

    PAD = -1  # sentinel resolved to the padding row of the token embedding

    def __init__(self, vocab_size: int, conditions: tuple[str, ...], l_max: int,
                 context_window: int = 4, cond_dim: int = 4, token_dim: int = 6,
                 pos_dim: int = 4, hidden: tuple[int, ...] = (32,),
                 count_features: bool = False, eps: float = EPS_CLAMP,
                 init_scale: float = 0.1, seed: int = 0):
        if vocab_size < 2 or l_max < 1 or context_window < 1 or not conditions:
            raise InvalidArgumentError("bad rate-net dimensions")
        self.vocab_size = vocab_size
        self.conditions = tuple(conditions)
        self.cond_index = {x: i for i, x in enumerate(self.conditions)}
        self.l_max = l_max
        self.context_window = context_window
        self.cond_dim = cond_dim
        self.token_dim = token_dim
        self.pos_dim = pos_dim
        self.hidden = tuple(hidden)
        self.count_features = count_features
        self.eps = eps
        self.init_scale = init_scale
        self.seed = seed

        rng = np.random.default_rng(seed)
        d_in = cond_dim + context_window * token_dim + pos_dim
        if count_features:
            d_in += vocab_size  # normalized occurrence counts over the whole prefix
        self.params: dict[str, np.ndarray] = {
            "cond_emb": rng.normal(scale=init_scale, size=(len(conditions), cond_dim)),
            "tok_emb": rng.normal(scale=init_scale, size=(vocab_size + 1, token_dim)),
            "pos_emb": rng.normal(scale=init_scale, size=(l_max + 1, pos_dim)),
        }
        widths = (d_in,) + self.hidden
        for i in range(len(self.hidden)):
            self.params[f"W{i}"] = rng.normal(scale=init_scale, size=(widths[i], widths[i + 1]))
            self.params[f"b{i}"] = np.zeros(widths[i + 1])
        # zero-initialized head and empty-prefix logits: a fresh net predicts 0.5
        self.params["W_out"] = np.zeros((widths[-1], vocab_size))
        self.params["b_out"] = np.zeros(vocab_size)
        self.params["root_logit"] = np.zeros(len(conditions))

    # -- feature building ----------------------------------------------------

    def _window_ids(self, prefix: Window) -> np.ndarray:
        k = self.context_window
        ids = [self.vocab_size] * max(0, k - len(prefix)) + list(prefix[-k:])
        return np.asarray(ids, dtype=np.int64)

    def _count_vec(self, prefix: Window) -> np.ndarray:
        counts = np.zeros(self.vocab_size)
        for tok in prefix:
            counts[tok] += 1.0
        return counts / self.l_max

    def _encode(self, x: str, prefix: Window):
        try:
            ci = self.cond_index[x]
        except KeyError:
            raise InvalidArgumentError(f"condition {x!r} unknown to this rate net") from None
        cnt = self._count_vec(prefix) if self.count_features else None
        return ci, self._window_ids(prefix), min(len(prefix), self.l_max), cnt

    # -- forward -------------------------------------------------------------

    def _forward_core(self, cond: np.ndarray, win: np.ndarray, pos: np.ndarray,
                      cnt: np.ndarray | None = None):
        p = self.params
        parts = [p["cond_emb"][cond], p["tok_emb"][win].reshape(len(cond), -1), p["pos_emb"][pos]]
        if self.count_features:
            parts.append(cnt)
        acts = [np.concatenate(parts, axis=1)]
        for i in range(len(self.hidden)):
            acts.append(np.tanh(acts[-1] @ p[f"W{i}"] + p[f"b{i}"]))
        sig = _sigmoid(acts[-1] @ p["W_out"] + p["b_out"])
        out = np.clip(sig, self.eps, 1.0 - self.eps)
        return out, (cond, win, pos, acts, sig)

    def _backward_core(self, cache, d_out: np.ndarray, grads: dict[str, np.ndarray]):
        cond, win, pos, acts, sig = cache
        p = self.params
        inside = (sig > self.eps) & (sig < 1.0 - self.eps)  # clamp kills the gradient
        dlogits = d_out * sig * (1.0 - sig) * inside
        grads["W_out"] += acts[-1].T @ dlogits
        grads["b_out"] += dlogits.sum(axis=0)
        dh = dlogits @ p["W_out"].T
        for i in reversed(range(len(self.hidden))):
            dz = dh * (1.0 - acts[i + 1] ** 2)
            grads[f"W{i}"] += acts[i].T @ dz
            grads[f"b{i}"] += dz.sum(axis=0)
            dh = dz @ p[f"W{i}"].T
        dc = self.cond_dim
        dt = self.context_window * self.token_dim
        np.add.at(grads["cond_emb"], cond, dh[:, :dc])
        np.add.at(grads["tok_emb"], win, dh[:, dc:dc + dt].reshape(len(cond), self.context_window, self.token_dim))
        np.add.at(grads["pos_emb"], pos, dh[:, dc + dt:dc + dt + self.pos_dim])
        # count features (if any) are raw inputs with no parameters of their own

    def scores_batch(self, x: str, prefixes: list[Window]) -> np.ndarray:
        try:
            ci = self.cond_index[x]
        except KeyError:
            raise InvalidArgumentError(f"condition {x!r} unknown to this rate net") from None
        cond = np.full(len(prefixes), ci, dtype=np.int64)
        win = np.stack([self._window_ids(p) for p in prefixes])
        pos = np.array([min(len(p), self.l_max) for p in prefixes], dtype=np.int64)
        cnt = np.stack([self._count_vec(p) for p in prefixes]) if self.count_features else None
        out, _ = self._forward_core(cond, win, pos, cnt)
        return out

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        return self.scores_batch(x, [tuple(prefix)])[0]

    def root_value(self, x: str) -> float:
        z = self.params["root_logit"][self.cond_index[x]]
        return float(np.clip(_sigmoid(z), self.eps, 1.0 - self.eps))

    def value(self, x: str, prefix: Window) -> float:
        prefix = tuple(prefix)
        if not prefix:
            return self.root_value(x)
        return float(self.scores(x, prefix[:-1])[prefix[-1]])

    def forward(self, x: str, prefix: Window) -> tuple[np.ndarray, float]:
        """Vector of rates for every one-token extension, plus the rate at the prefix."""
        prefix = tuple(prefix)
        return self.scores(x, prefix), self.value(x, prefix)

    # -- parameter vector helpers ---------------------------------------------

    def _param_names(self) -> list[str]:
        return sorted(self.params)

    def get_theta(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self._param_names()])

    def set_theta(self, theta: np.ndarray) -> None:
        i = 0
        for n in self._param_names():
            size = self.params[n].size
            self.params[n] = theta[i:i + size].reshape(self.params[n].shape).copy()
            i += size
        if i != theta.size:
            raise InvalidArgumentError("theta size mismatch")

    def clone(self) -> "RateNet":
        dup = RateNet(self.vocab_size, self.conditions, self.l_max, self.context_window,
                      self.cond_dim, self.token_dim, self.pos_dim, self.hidden,
                      self.count_features, self.eps, self.init_scale, self.seed)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup

    # -- persistence -----------------------------------------------------------

    def to_json_dict(self) -> dict:
        from .seqmodel import format_float
        return {
            "format": "guidelab/rate-net",
            "version": 1,
            "vocab_size": self.vocab_size,
            "conditions": list(self.conditions),
            "l_max": self.l_max,
            "context_window": self.context_window,
            "cond_dim": self.cond_dim,
            "token_dim": self.token_dim,
            "pos_dim": self.pos_dim,
            "hidden": list(self.hidden),
            "count_features": self.count_features,
            "eps": self.eps,
            "init_scale": self.init_scale,
            "seed": self.seed,
            "params": {
                name: {"shape": list(arr.shape),
                       "data": [format_float(v) for v in arr.ravel()]}
                for name, arr in sorted(self.params.items())
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RateNet":
        if doc.get("format") != "guidelab/rate-net":
            raise InvalidArgumentError(f"not a rate-net document: format={doc.get('format')!r}")
        net = cls(doc["vocab_size"], tuple(doc["conditions"]), doc["l_max"],
                  doc["context_window"], doc["cond_dim"], doc["token_dim"],
                  doc["pos_dim"], tuple(doc["hidden"]), doc.get("count_features", False),
                  doc["eps"], doc["init_scale"], doc["seed"])
        for name, entry in doc["params"].items():
            net.params[name] = np.array([float(v) for v in entry["data"]]).reshape(entry["shape"])
        return net

    def save(self, path) -> None:
        from .storage import atomic_write_json
        atomic_write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path) -> "RateNet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# training-set sampling


def sample_training_set(base: TabularBaseModel, oracle: Oracle, xs: list[str],
                        cfg: TrainConfig, proposal=None, rng=None) -> list[TrainingExample]:
    """Draw labeled training sequences; weights are self-normalized per condition.

    Plain sampling (T=1, no proposal) gives unit weights.  Temperature sampling
    draws from the sequence-level tempered distribution (by enumeration, which
    these models afford) and compensates with base-probability powers, so the
    weighted loss still estimates the plain expected loss.  Importance sampling
    draws from the guided ``proposal`` and weighs by the base-to-proposal
    ratio.  All weights are computed in log space first.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
    if cfg.importance_sampling and proposal is None:
        raise InvalidArgumentError("importance sampling requires a guided proposal")
    out: list[TrainingExample] = []
    for x in xs:
        seqs: list[Sequence] = []
        logw = np.zeros(cfg.samples_per_x)
        if cfg.importance_sampling:
            for j in range(cfg.samples_per_x):
                seq, lp_q = proposal.sample(x, rng)
                lp_p = base.sequence_logprob(x, seq)
                assert lp_q > float("-inf"), "clamped proposal cannot assign zero mass"
                logw[j] = lp_p - lp_q
                seqs.append(seq)
        elif cfg.temperature != 1.0:
            space = list(base.enumerate_sequences(x))
            logs = np.array([math.log(p) for _, p in space])
            tempered = np.exp(logs / cfg.temperature - (logs / cfg.temperature).max())
            cum = np.cumsum(tempered)
            for j in range(cfg.samples_per_x):
                idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                seqs.append(space[idx][0])
                logw[j] = (1.0 - 1.0 / cfg.temperature) * logs[idx]
        else:
            for j in range(cfg.samples_per_x):
                seq, _ = base.sample_sequence(x, rng)
                seqs.append(seq)
        shifted = np.exp(logw - logw.max())
        weights = shifted * (len(shifted) / shifted.sum())  # mean weight 1 per condition
        for seq, lw, w in zip(seqs, logw, weights):
            label = oracle.evaluate(x, seq)
            out.append(TrainingExample(x=x, y=seq, label=label, log_weight=float(lw),
                                       weight=float(w)))
    return out


# ---------------------------------------------------------------------------
# losses against the SuccessRate interface (usable with exact rates as a shim)


def _bce(s: float, c: float, eps: float) -> float:
    s = min(max(s, eps), 1.0 - eps)
    return -(c * math.log(s) + (1.0 - c) * math.log(1.0 - s))


def _f_kl(a: float, b: float, eps: float) -> float:
    a = min(max(a, eps), 1.0 - eps)
    b = min(max(b, eps), 1.0 - eps)
    return a * math.log(a / b) + (1.0 - a) * math.log((1.0 - a) / (1.0 - b))


def ce_loss(rate: SuccessRate, ex: TrainingExample, eps: float = EPS_CLAMP) -> float:
    """Binary cross entropy between the rate at every prefix of ``ex.y`` and its label."""
    y = ex.y.y
    c = float(ex.label)
    total = _bce(rate.value(ex.x, ()), c, eps)
    for i in range(1, len(y) + 1):
        total += _bce(rate.value(ex.x, y[:i]), c, eps)
    return total


def reg_loss(rate: SuccessRate, base: TabularBaseModel, ex: TrainingExample,
             eps: float = EPS_CLAMP) -> float:
    """Consistency penalty: the rate should equal the base-expected rate of its extensions."""
    y = ex.y.y
    total = 0.0
    for i in range(1, len(y)):  # prefixes y[:i], i >= 1, still extendable
        prefix = y[:i]
        row = base.row(ex.x, prefix)
        a = float(np.dot(rate.scores(ex.x, prefix), row))
        b = rate.value(ex.x, prefix)
        total += _f_kl(a, b, eps)  # both arguments clamped inside
    return total


# ---------------------------------------------------------------------------
# vectorized training core


class _Bundle:
    """Precomputed index arrays for every prefix position of an example set."""

    def __init__(self, net: RateNet, base: TabularBaseModel, examples: list[TrainingExample]):
        cond, win, pos, next_tok, ex_id, in_ex = [], [], [], [], [], []
        p_rows, cnts = [], []
        starts = []
        for e, ex in enumerate(examples):
            starts.append(len(next_tok))
            y = ex.y.y
            for i in range(len(y)):
                prefix = y[:i]
                ci, w, ps, cv = net._encode(ex.x, prefix)
                cond.append(ci)
                win.append(w)
                pos.append(ps)
                if cv is not None:
                    cnts.append(cv)
                next_tok.append(y[i])
                ex_id.append(e)
                in_ex.append(i)
                p_rows.append(base.row(ex.x, prefix))
        self.examples = examples
        self.cond = np.array(cond, dtype=np.int64)
        self.win = np.stack(win)
        self.pos = np.array(pos, dtype=np.int64)
        self.cnt = np.stack(cnts) if cnts else None
        self.next_tok = np.array(next_tok, dtype=np.int64)
        self.ex_id = np.array(ex_id, dtype=np.int64)
        self.in_ex = np.array(in_ex, dtype=np.int64)
        self.p_rows = np.stack(p_rows)
        self.starts = np.array(starts, dtype=np.int64)
        self.labels = np.array([ex.label for ex in examples], dtype=np.float64)
        self.weights = np.array([ex.weight for ex in examples], dtype=np.float64)
        self.root_cond = np.array([net.cond_index[ex.x] for ex in examples], dtype=np.int64)
        self.lengths = np.array([len(ex.y.y) for ex in examples], dtype=np.int64)

    def subset(self, example_ids: np.ndarray) -> "_BundleView":
        return _BundleView(self, example_ids)


class _BundleView:
    def __init__(self, bundle: _Bundle, example_ids: np.ndarray):
        sel = np.concatenate([
            np.arange(bundle.starts[e], bundle.starts[e] + bundle.lengths[e])
            for e in example_ids]) if len(example_ids) else np.array([], dtype=np.int64)
        self.cond = bundle.cond[sel]
        self.win = bundle.win[sel]
        self.pos = bundle.pos[sel]
        self.cnt = bundle.cnt[sel] if bundle.cnt is not None else None
        self.next_tok = bundle.next_tok[sel]
        self.in_ex = bundle.in_ex[sel]
        self.p_rows = bundle.p_rows[sel]
        # positions of one example stay contiguous, so "previous position" is index-1
        self.ex_id = np.repeat(np.arange(len(example_ids)), bundle.lengths[example_ids])
        self.labels = bundle.labels[example_ids]
        self.weights = bundle.weights[example_ids]
        self.root_cond = bundle.root_cond[example_ids]
        self.n_examples = len(example_ids)


def _loss_and_grads(net: RateNet, view: _BundleView, lam: float,
                    want_grads: bool = True):
    """Weighted mean of (cross-entropy + lam * consistency) with analytic gradients."""
    eps = net.eps
    n_ex = view.n_examples
    out, cache = net._forward_core(view.cond, view.win, view.pos, view.cnt)
    rows = np.arange(out.shape[0])

    root_sig = _sigmoid(net.params["root_logit"][view.root_cond])
    root_out = np.clip(root_sig, eps, 1.0 - eps)

    c_pos = view.labels[view.ex_id]          # label per position
    w_pos = view.weights[view.ex_id]
    s_next = out[rows, view.next_tok]        # rate at the prefix extended by the taken token

    ce_pos = -(c_pos * np.log(s_next) + (1.0 - c_pos) * np.log(1.0 - s_next))
    ce_root = -(view.labels * np.log(root_out) + (1.0 - view.labels) * np.log(1.0 - root_out))

    reg_mask = view.in_ex >= 1
    a = np.einsum("ij,ij->i", out, view.p_rows)
    a = np.clip(a, eps, 1.0 - eps)
    b = np.empty_like(a)
    b[1:] = s_next[:-1]  # previous position of the same example (contiguous layout)
    b[0] = 0.5           # never used: position 0 of the first example has in_ex == 0
    fkl = np.where(reg_mask,
                   a * np.log(a / b) + (1.0 - a) * np.log((1.0 - a) / (1.0 - b)),
                   0.0)

    per_ex_ce = np.bincount(view.ex_id, weights=ce_pos, minlength=n_ex) + ce_root
    per_ex_reg = np.bincount(view.ex_id, weights=fkl, minlength=n_ex)
    loss = float(np.mean(view.weights * (per_ex_ce + lam * per_ex_reg)))
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss became non-finite: ce={per_ex_ce}, reg={per_ex_reg}")

    resid = np.abs(a - b)[reg_mask]
    resid_w = w_pos[reg_mask]
    mean_residual = float((resid * resid_w).sum() / resid_w.sum()) if resid.size else 0.0

    if not want_grads:
        return loss, None, None, mean_residual

    scale = w_pos / n_ex
    d_out = np.zeros_like(out)
    # cross entropy through the taken-token entries
    d_s_next = scale * (-(c_pos / s_next) + (1.0 - c_pos) / (1.0 - s_next))
    # consistency term: d/da at this position ...
    if lam > 0.0:
        da = np.where(reg_mask, np.log(a / b) - np.log((1.0 - a) / (1.0 - b)), 0.0)
        da *= scale * lam
        inside_a = (a > eps) & (a < 1.0 - eps)
        d_out += (da * inside_a)[:, None] * view.p_rows
        # ... and d/db at the *next* position flows into this taken-token entry
        db = np.where(reg_mask, -a / b + (1.0 - a) / (1.0 - b), 0.0)
        db *= scale * lam
        d_s_next[:-1] += db[1:]
    np.add.at(d_out, (rows, view.next_tok), d_s_next)

    grads = {name: np.zeros_like(arr) for name, arr in net.params.items()}
    net._backward_core(cache, d_out, grads)

    root_inside = (root_sig > eps) & (root_sig < 1.0 - eps)
    d_root = (view.weights / n_ex) * (-(view.labels / root_out) + (1.0 - view.labels) / (1.0 - root_out))
    d_root *= root_sig * (1.0 - root_sig) * root_inside
    np.add.at(grads["root_logit"], view.root_cond, d_root)
    return loss, grads, d_out, mean_residual


def train(net: RateNet, examples: list[TrainingExample], base: TabularBaseModel,
          cfg: TrainConfig) -> tuple[RateNet, list[float], list[float]]:
    """Gradient descent on the weighted total loss; returns loss and residual curves."""
    if not examples:
        raise InvalidArgumentError("training requires at least one example")
    bundle = _Bundle(net, base, examples)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(examples)
    losses: list[float] = []
    residuals: list[float] = []
    for _ in range(cfg.epochs):
        if cfg.batch_size and cfg.batch_size < n:
            order = rng.permutation(n)
            epoch_loss = 0.0
            epoch_resid = 0.0
            n_batches = 0
            for lo in range(0, n, cfg.batch_size):
                view = bundle.subset(order[lo:lo + cfg.batch_size])
                loss, grads, _, resid = _loss_and_grads(net, view, cfg.lam)
                for name, g in grads.items():
                    net.params[name] -= cfg.lr * g
                epoch_loss += loss
                epoch_resid += resid
                n_batches += 1
            losses.append(epoch_loss / n_batches)
            residuals.append(epoch_resid / n_batches)
        else:
            view = bundle.subset(np.arange(n))
            loss, grads, _, resid = _loss_and_grads(net, view, cfg.lam)
            for name, g in grads.items():
                net.params[name] -= cfg.lr * g
            losses.append(loss)
            residuals.append(resid)
    return net, losses, residuals


def warmup(net: RateNet, base: TabularBaseModel, positives: list[TrainingExample],
           cfg: TrainConfig) -> RateNet:
    """Fit the guided model's likelihood of oracle-satisfying samples.

    Only the rate net's parameters move; the base model stays frozen.  With no
    positive examples a ``WarmupSkippedWarning`` is emitted and the net is
    returned unchanged.
    """
    if any(ex.label != 1 for ex in positives):
        raise InvalidArgumentError("warmup expects oracle-satisfying examples only")
    if not positives:
        warnings.warn("no positive examples; warmup skipped", WarmupSkippedWarning)
        return net
    if cfg.warmup_epochs == 0:
        return net
    bundle = _Bundle(net, base, positives)
    view = bundle.subset(np.arange(len(positives)))
    rows = np.arange(view.cond.shape[0])
    n_ex = view.n_examples
    for _ in range(cfg.warmup_epochs):
        out, cache = net._forward_core(view.cond, view.win, view.pos, view.cnt)
        numer = out * view.p_rows
        z = numer.sum(axis=1)
        q_taken = numer[rows, view.next_tok] / z
        if np.any(q_taken <= 0.0):
            raise NonFiniteLossError("positive example has zero mass under the guided model")
        # d(-log q)/d out = p_row/Z - one_hot(taken)/out_taken
        d_out = view.p_rows / z[:, None] / n_ex
        d_taken = -1.0 / (out[rows, view.next_tok] * n_ex)
        np.add.at(d_out, (rows, view.next_tok), d_taken)
        grads = {name: np.zeros_like(arr) for name, arr in net.params.items()}
        net._backward_core(cache, d_out, grads)
        for name, g in grads.items():
            net.params[name] -= cfg.lr * g
    return net


class MixtureProposal:
    """Defensive importance-sampling proposal: guided rows mixed with base rows.

    Mixing keeps every importance weight below 1/(1-mix), which protects the
    effective sample size when the guided model concentrates hard.  If the
    guided row is infeasible at a prefix (possible only with exact rates), the
    proposal falls back to the base row there.
    """

    def __init__(self, guided, mix: float = 0.5):
        if not 0.0 < mix < 1.0:
            raise InvalidArgumentError("mix must lie strictly between 0 and 1")
        self.guided = guided
        self.mix = mix
        self.vocab = guided.vocab
        self.l_max = guided.l_max

    def step_row(self, x: str, prefix: Window) -> np.ndarray:
        from .errors import InfeasibleGuidanceError
        base_row = self.guided.base.row(x, prefix)
        try:
            guided_row = self.guided.step_row(x, prefix)
        except InfeasibleGuidanceError:
            return base_row
        return self.mix * guided_row + (1.0 - self.mix) * base_row

    def sample(self, x: str, rng) -> tuple[Sequence, float]:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        eos = self.vocab.eos_id
        y: list[int] = []
        lp = 0.0
        while True:
            row = self.step_row(x, tuple(y))
            cum = np.cumsum(row)
            tok = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            lp += math.log(row[tok])
            y.append(tok)
            if tok == eos:
                return Sequence(x=x, y=tuple(y), terminated=True), lp


@dataclass
class PipelineResult:
    """Outcome of a full training pipeline run."""

    model: "RateNet"
    losses: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    examples_total: int = 0
    examples_positive: int = 0
    warmup_positives: int = 0


def train_pipeline(net: RateNet, base: TabularBaseModel, oracle: Oracle, xs: list[str],
                   cfg: TrainConfig, demonstrations: list[TrainingExample] | None = None,
                   proposal_mix: float = 0.5) -> PipelineResult:
    """Warmup, sampling (plain / temperature / importance), and training in one pass.

    With importance sampling enabled, the proposal is the current net composed
    with the base model behind a defensive mixture; it refreshes every
    ``cfg.proposal_refresh_period`` epochs (0 = never), and each refresh adds a
    fresh sample round to the cumulative training set.  Warmup positives come
    from ``demonstrations`` when given, otherwise from a plain pilot draw of
    ``cfg.samples_per_x`` sequences per condition.
    """
    from .decode import GuidedModel

    result = PipelineResult(model=net)
    if cfg.warmup_epochs > 0:
        positives = demonstrations
        if positives is None:
            rng = np.random.default_rng(cfg.seed + 101)
            positives = []
            for x in xs:
                for _ in range(cfg.samples_per_x):
                    seq, _ = base.sample_sequence(x, rng)
                    if oracle.evaluate(x, seq):
                        positives.append(TrainingExample(x=x, y=seq, label=1,
                                                         log_weight=0.0, weight=1.0))
        result.warmup_positives = len(positives)
        net = warmup(net, base, positives, cfg)

    if not cfg.importance_sampling:
        examples = sample_training_set(base, oracle, xs, cfg)
        result.examples_total = len(examples)
        result.examples_positive = sum(e.label for e in examples)
        _, losses, residuals = train(net, examples, base, cfg)
        result.losses, result.residuals = losses, residuals
        return result

    period = cfg.proposal_refresh_period
    schedule = [cfg.epochs] if period <= 0 or period >= cfg.epochs else \
        [period] * (cfg.epochs // period) + ([cfg.epochs % period] if cfg.epochs % period else [])
    union: list[TrainingExample] = []
    for rd, epochs in enumerate(schedule):
        proposal = MixtureProposal(GuidedModel(base, net), proposal_mix)
        round_cfg = replace(cfg, epochs=epochs, seed=cfg.seed + 17 * rd)
        round_ex = sample_training_set(base, oracle, xs, round_cfg, proposal=proposal)
        union.extend(round_ex)
        _, losses, residuals = train(net, union, base, round_cfg)
        result.losses.extend(losses)
        result.residuals.extend(residuals)
    result.examples_total = len(union)
    result.examples_positive = sum(e.label for e in union)
    return result


def grad_check(net: RateNet, examples: list[TrainingExample], base: TabularBaseModel,
               cfg: TrainConfig, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    bundle = _Bundle(net, base, examples)
    view = bundle.subset(np.arange(len(examples)))
    _, grads, _, _ = _loss_and_grads(net, view, cfg.lam)
    names = net._param_names()
    analytic = np.concatenate([grads[n].ravel() for n in names])

    theta0 = net.get_theta()
    numeric = np.zeros_like(theta0)
    for i in range(theta0.size):
        for sign in (+1.0, -1.0):
            theta = theta0.copy()
            theta[i] += sign * step
            net.set_theta(theta)
            loss, _, _, _ = _loss_and_grads(net, view, cfg.lam, want_grads=False)
            numeric[i] += sign * loss
        numeric[i] /= 2.0 * step
    net.set_theta(theta0)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
