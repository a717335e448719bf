"""Joint CTC/attention training at toy scale."""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .ctc import CtcInfeasibleError, ctc_loss
from .mta import decoder_train_forward

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    alpha: float = 0.7
    label_smoothing: float = 0.1
    dropout: float = 0.1
    warmup: int = 200
    lr_scale: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    average_last: int = 10
    seed: int = 0
    mta_noise: bool = True
    grad_clip: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing penalty must lie in [0, 1)")


def smoothed_targets(targets, vocab_size, penalty):
    dist = np.full((len(targets), vocab_size), penalty / vocab_size)
    dist[np.arange(len(targets)), targets] += 1.0 - penalty
    return dist


def label_smoothed_ce(log_probs, targets, penalty):
    """Cross-entropy against ``(1 - penalty) * onehot + penalty * uniform``, summed over positions."""
    if not 0.0 <= penalty < 1.0:
        raise ValueError("penalty must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    dist = smoothed_targets(targets, log_probs.shape[-1], penalty)
    return -(log_probs * dist).sum()


def joint_loss(model, features, labels, cfg=TrainConfig(), rng=None, training=True):
    """``alpha * L_dec + (1 - alpha) * L_ctc`` for one utterance.

    Returns ``(loss, info)``; ``info`` carries the two components and the
    teacher-forced token accuracy. In eval mode (``training=False``) dropout
    and MTA noise are off and the result is deterministic.
    """
    mc = model.config
    labels = [int(x) for x in labels]
    drop = cfg.dropout if training else 0.0
    enc = model.encode(features, dropout_rate=drop, rng=rng if training else None)
    info = {}
    loss = None
    if cfg.alpha < 1.0:
        l_ctc = ctc_loss(model.ctc_log_probs(enc), labels, blank=mc.blank)
        info["ctc"] = float(l_ctc.data)
        loss = l_ctc * (1.0 - cfg.alpha)
    if cfg.alpha > 0.0:
        dec_in = [mc.sos] + labels
        dec_out = labels + [mc.eos]
        logp, _ = decoder_train_forward(
            model.decoder,
            dec_in,
            enc,
            noise=training and cfg.mta_noise,
            rng=rng if training else None,
            dropout_rate=drop,
        )
        l_dec = label_smoothed_ce(logp, dec_out, cfg.label_smoothing)
        info["dec"] = float(l_dec.data)
        info["correct"] = int((logp.data.argmax(axis=1) == np.asarray(dec_out)).sum())
        info["tokens"] = len(dec_out)
        term = l_dec * cfg.alpha
        loss = term if loss is None else loss + term
    return loss, info


def noam_lr(step, d_model, warmup, scale=1.0):
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def average_checkpoints(snapshots):
    """Elementwise mean of parameter dicts with identical names and shapes."""
    if not snapshots:
        raise ValueError("nothing to average")
    ref = snapshots[0]
    for snap in snapshots[1:]:
        if snap.keys() != ref.keys():
            raise ValueError("checkpoints have different parameter names")
        for name, value in snap.items():
            if np.shape(value) != np.shape(ref[name]):
                raise ValueError(f"shape mismatch for {name}: {np.shape(value)} vs {np.shape(ref[name])}")
    return {name: sum(np.asarray(s[name]) for s in snapshots) / len(snapshots) for name in ref}


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def snapshot(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def load_snapshot(model, values):
    for k, p in model.parameters().items():
        p.data = np.array(values[k], dtype=np.float64)


def train(model, dataset, cfg=TrainConfig(), on_epoch=None):
    """Train in place on ``dataset`` (a list of ``(features, labels)``).

    After the last epoch the parameters are replaced by the average of the
    last ``cfg.average_last`` epoch snapshots. Returns per-epoch records.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history, snaps = [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        tot_loss = tot_correct = tot_tokens = used = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[b0 : b0 + cfg.batch_size]]
            with Graph(params) as graph:
                losses = []
                for feats, labels in batch:
                    try:
                        loss, info = joint_loss(model, feats, labels, cfg, rng, training=True)
                    except CtcInfeasibleError as err:
                        logger.warning("skipping utterance: %s", err)
                        continue
                    losses.append(loss)
                    tot_correct += info.get("correct", 0)
                    tot_tokens += info.get("tokens", 0)
                if not losses:
                    continue
                total = losses[0]
                for extra in losses[1:]:
                    total = total + extra
                total = total * (1.0 / len(losses))
                grads = graph.backward(total)
            for p in params.values():
                p.zero_grad()
            if cfg.grad_clip is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.grad_clip:
                    grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
            step += 1
            opt.step(grads, noam_lr(step, model.config.d_model, cfg.warmup, cfg.lr_scale))
            tot_loss += float(total.data) * len(losses)
            used += len(losses)
        rec = {
            "epoch": epoch,
            "loss": tot_loss / max(used, 1),
            "token_acc": tot_correct / max(tot_tokens, 1),
            "lr": noam_lr(max(step, 1), model.config.d_model, cfg.warmup, cfg.lr_scale),
        }
        history.append(rec)
        snaps.append(snapshot(model))
        snaps = snaps[-cfg.average_last :]
        logger.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["token_acc"])
        if on_epoch is not None:
            on_epoch(rec)
    if snaps and cfg.average_last > 1:
        load_snapshot(model, average_checkpoints(snaps))
    return history


def evaluate_loss(model, dataset, cfg=TrainConfig()):
    """Mean eval-mode joint loss over ``dataset``."""
    vals = [float(joint_loss(model, f, y, cfg, training=False)[0].data) for f, y in dataset]
    return float(np.mean(vals))
