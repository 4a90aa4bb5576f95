"""Training the toy transformer with torch autograd.

The numpy forward in :mod:`svflow.attention` is the analysis path; this
module mirrors it in float64 torch so the parameters can be fitted.  The two
forwards are cross-checked in the tests.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from . import distributions as dist
from .attention import MhaLayer, ToyTransformer

IGNORE = -1


def _t(a):
    return torch.tensor(np.asarray(a, dtype=float), dtype=torch.float64, requires_grad=True)


class TorchToy:
    """Trainable float64 copy of a ToyTransformer's parameters."""

    def __init__(self, model):
        self.model = model
        self.params = []
        self.layers = []
        for layer in model.layers:
            if isinstance(layer, MhaLayer):
                heads = [(_t(h.QK), _t(h.OV)) for h in layer.heads]
                self.layers.append(("mha", heads))
                self.params += [p for qk_ov in heads for p in qk_ov]
            else:
                experts = [tuple(_t(a) for a in (e.W1, e.b1, e.W2, e.b2)) for e in layer.experts]
                gate = (_t(layer.gate_weight), _t(layer.gate_bias))
                ema = torch.tensor(layer.ema_means, dtype=torch.float64)
                self.layers.append(("moe", (experts, gate, ema, layer)))
                self.params += [p for e in experts for p in e] + list(gate)
        self.head = (_t(model.head_weight), _t(model.head_bias))
        self.params += list(self.head)

    def forward(self, embeddings, update_ema=False):
        """Returns (logits, routings per mixture layer, attention per attention layer)."""
        d, W = self.model.dim, self.model.window
        X = np.sqrt(d) * torch.as_tensor(np.asarray(embeddings, dtype=float))
        S, N, _ = X.shape
        pos = torch.arange(N)[:, None] - W + torch.arange(W)[None, :]
        mask = pos >= 0
        routings, attention = [], []
        for kind, p in self.layers:
            if kind == "mha":
                pad = torch.cat([torch.zeros(S, W, d, dtype=X.dtype), X], dim=1)
                K = pad.unfold(1, W, 1)[:, :N].permute(0, 1, 3, 2)  # (S, N, W, d)
                f = torch.zeros_like(X)
                probs = []
                for QK, OV in p:
                    lg = torch.einsum("snd,de,snwe->snw", X, QK, K)
                    a = torch.softmax(torch.where(mask, lg, torch.full_like(lg, -1e300)), dim=-1) * mask
                    f = f + torch.einsum("snw,snwd->snd", a, K @ OV.T)
                    probs.append(a)
                attention.append(torch.stack(probs))
            else:
                experts, (G, b), ema, layer = p
                g = torch.softmax(X @ G.T + b, dim=-1)
                outs = torch.stack([torch.tanh(X @ W1.T + b1) @ W2.T + b2 for W1, b1, W2, b2 in experts], dim=-2)
                if layer.ema_center:
                    raw = outs.detach()
                    outs = outs - ema
                    if update_ema:
                        ema.mul_(layer.ema_decay).add_((1.0 - layer.ema_decay) * raw.reshape(-1, *raw.shape[-2:]).mean(0))
                f = torch.einsum("sne,sned->snd", g, outs)
                routings.append(g)
            Y = X + f
            X = np.sqrt(d) * Y / torch.linalg.norm(Y, dim=-1, keepdim=True)
        logits = X @ self.head[0] + self.head[1]
        return logits, routings, attention

    def export(self):
        """Write the current parameters back into a fresh ToyTransformer."""
        model = ToyTransformer.from_dict(self.model.to_dict())
        for layer, (kind, p) in zip(model.layers, self.layers):
            if kind == "mha":
                for h, (QK, OV) in zip(layer.heads, p):
                    h.QK = QK.detach().numpy().copy()
                    h.OV = OV.detach().numpy().copy()
            else:
                experts, (G, b), ema, _ = p
                for e, (W1, b1, W2, b2) in zip(layer.experts, experts):
                    e.W1, e.b1, e.W2, e.b2 = (a.detach().numpy().copy() for a in (W1, b1, W2, b2))
                layer.gate_weight = G.detach().numpy().copy()
                layer.gate_bias = b.detach().numpy().copy()
                layer.ema_means = ema.numpy().copy()
        model.head_weight = self.head[0].detach().numpy().copy()
        model.head_bias = self.head[1].detach().numpy().copy()
        return model


def balance_loss_torch(routing):
    """Differentiable sum_z f_z P_z: f (argmax fractions) is constant, P carries the gradient."""
    R = routing.reshape(-1, routing.shape[-1])
    f = torch.bincount(R.detach().argmax(dim=-1), minlength=R.shape[-1]).to(R.dtype) / R.shape[0]
    return (f * R.mean(dim=0)).sum()


def routing_concentration(routing, window_full=None):
    """kl_to_uniform of the mean routing distribution.

    For attention ``routing`` is (H, S, N, W) and only positions with a full
    key window are averaged; for mixtures it is (S, N, E).
    """
    r = np.asarray(routing)
    if r.ndim == 4:
        start = r.shape[-1] if window_full is None else window_full
        r = r[:, :, start:]
    mean = r.reshape(-1, r.shape[-1]).mean(axis=0)
    return float(dist.kl_to_uniform(mean))


@dataclass
class ToyTrainConfig:
    steps: int = 400
    batch: int = 16
    lr: float = 3e-3
    balance_weight: float = 0.0
    seed: int = 0
    log_every: int = 50


@dataclass
class ToyTrace:
    rows: list = field(default_factory=list)


def masked_ce(logits, targets):
    t = torch.as_tensor(targets)
    valid = t != IGNORE
    return torch.nn.functional.cross_entropy(logits[valid], t[valid])


def train_toy(model, corpus, cfg, eval_corpus=None):
    """Adam on masked cross-entropy (+ balance loss on mixture layers).

    Returns (trained ToyTransformer, trace rows with loss, accuracy and the
    per-layer routing concentration on the evaluation corpus).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tm = TorchToy(model)
    opt = torch.optim.Adam(tm.params, lr=cfg.lr)
    emb = np.stack([s.embeddings for s in corpus.sequences])
    tgt = np.stack([s.targets for s in corpus.sequences])
    eval_corpus = corpus if eval_corpus is None else eval_corpus
    trace = ToyTrace()
    for step in range(cfg.steps + 1):
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.rows.append(evaluate_toy(tm.export(), eval_corpus) | {"step": step})
        if step == cfg.steps:
            break
        idx = rng.integers(0, len(emb), size=cfg.batch)
        logits, routings, _ = tm.forward(emb[idx], update_ema=True)
        loss = masked_ce(logits, tgt[idx])
        if cfg.balance_weight:
            loss = loss + cfg.balance_weight * sum(balance_loss_torch(r) for r in routings)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"toy transformer loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return tm.export(), trace


def evaluate_toy(model, corpus):
    emb = np.stack([s.embeddings for s in corpus.sequences])
    tgt = np.stack([s.targets for s in corpus.sequences])
    rec = model.forward(emb)
    valid = tgt != IGNORE
    probs = rec.probs[valid]
    t = tgt[valid]
    row = {
        "loss": float(-np.mean(np.log(np.maximum(probs[np.arange(len(t)), t], 1e-300)))),
        "accuracy": float(np.mean(probs.argmax(-1) == t)),
    }
    for i in range(model.num_layers):
        r = rec.attention.get(i, rec.routing.get(i))
        row[f"concentration_{i}"] = routing_concentration(r)
    return row
