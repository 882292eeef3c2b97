"""Finite-difference self-check of every primitive and of the full model + loss graph."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import GradCheckReport, Tensor, grad_check
from .losses import LossWeights, total_loss
from .model import ModelConfig, forward, init_params


def _leaf(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """name -> (scalar function, its parameters) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    cases = {}

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    wa = Tensor(rng.uniform(0.5, 1.5, size=(3, 2)))
    cases["matmul"] = (lambda a=a, b=b, w=wa: ag.sum_all(ag.mul(ag.matmul(a, b), w)), [a, b])

    t = _leaf(rng, 3, 5)
    wt = Tensor(rng.uniform(0.5, 1.5, size=(5, 3)))
    cases["transpose"] = (lambda t=t, w=wt: ag.sum_all(ag.mul(ag.transpose(t), w)), [t])

    for kind in ("add", "sub", "mul"):
        x, y = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
        w = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)))
        cases[kind] = (lambda kind=kind, x=x, y=y, w=w: ag.sum_all(ag.mul(ag.elementwise(kind, x, y), w)), [x, y])

    s, x = _leaf(rng, 1), _leaf(rng, 2, 3)
    w = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)))
    cases["scalar_mul"] = (lambda s=s, x=x, w=w: ag.sum_all(ag.mul(ag.mul(s, x), w)), [s, x])

    for kind in ("tanh", "sigmoid", "relu", "abs", "square"):
        # keep relu/abs inputs away from the kink at zero
        x = _leaf(rng, 2, 3, low=0.2, high=1.5) if kind in ("relu", "abs") else _leaf(rng, 2, 3, low=-2, high=2)
        if kind in ("relu", "abs"):
            x.data *= np.where(rng.random((2, 3)) < 0.5, -1.0, 1.0)
        w = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)))
        cases[kind] = (lambda kind=kind, x=x, w=w: ag.sum_all(ag.mul(ag.elementwise(kind, x), w)), [x])

    x, bias = _leaf(rng, 3, 4), _leaf(rng, 4)
    w = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
    cases["add_rowvec"] = (lambda x=x, b=bias, w=w: ag.sum_all(ag.mul(ag.add_rowvec(x, b), w)), [x, bias])

    x = _leaf(rng, 3, 4)
    cases["sum"] = (lambda x=x: ag.sum_all(ag.square(x)), [x])
    x2 = _leaf(rng, 3, 4)
    cases["mean"] = (lambda x=x2: ag.mean_all(ag.square(x)), [x2])

    x = _leaf(rng, 3, 4)
    w = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
    cases["l2_normalize"] = (lambda x=x, w=w: ag.sum_all(ag.mul(ag.l2_normalize(x), w)), [x])

    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    w = Tensor(rng.uniform(0.5, 1.5, size=(3, 2, 4)))
    cases["concat_channels"] = (lambda a=a, b=b, w=w: ag.sum_all(ag.mul(ag.concat_channels(a, b), w)), [a, b])

    x = _leaf(rng, 3, 2, 4)
    w0, w1 = Tensor(rng.uniform(0.5, 1.5, size=(3, 4))), Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))

    def split_f(x=x, w0=w0, w1=w1):
        c0, c1 = ag.split_channels(x)
        return ag.add(ag.sum_all(ag.mul(c0, w0)), ag.sum_all(ag.mul(c1, w1)))

    cases["split_channels"] = (split_f, [x])

    x, kern, cb = _leaf(rng, 3, 2, 5), _leaf(rng, 2, 3), _leaf(rng, 1)
    w = Tensor(rng.uniform(0.5, 1.5, size=(3, 5)))
    cases["conv1d_mix"] = (lambda x=x, k=kern, c=cb, w=w: ag.sum_all(ag.mul(ag.conv1d_mix(x, k, c), w)), [x, kern, cb])

    x = _leaf(rng, 3, 5, low=-3, high=3)
    w = Tensor(rng.uniform(0.5, 1.5, size=(3, 5)))
    cases["log_softmax"] = (lambda x=x, w=w: ag.sum_all(ag.mul(ag.log_softmax(x), w)), [x])

    x = _leaf(rng, 4, 3)
    idx = [0, 2, 1, 2]
    wp = Tensor(rng.uniform(0.5, 1.5, size=4))
    cases["pick"] = (lambda x=x, w=wp: ag.sum_all(ag.mul(ag.pick(x, idx), w)), [x])
    return cases


def model_case(seed: int = 0, batch: int = 4, conv_kernel: int = 3):
    """Full forward + weighted three-term loss on a tiny random batch."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(face_dim=6, voice_dim=5, latent_dim=4, num_identities=3, conv_kernel=conv_kernel, seed=seed)
    params = init_params(cfg)
    # nonzero biases so their gradients are exercised away from the init point
    for t in (params.bf, params.bv, params.c, params.bc):
        t.data[:] = rng.uniform(-0.5, 0.5, size=t.shape)
    face = rng.normal(size=(batch, cfg.face_dim))
    voice = rng.normal(size=(batch, cfg.voice_dim))
    labels = np.array([0, 0, 1, 2] * (batch // 4) + [1] * (batch % 4))
    weights = LossWeights()

    def f():
        out = forward(params, face, voice)
        return total_loss(out.latent, out.fused, out.logits, labels, weights).total

    return f, params.tensors()


def run_suite(tol: float = 1e-4, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    results = [(name, grad_check(f, ps, tol)) for name, (f, ps) in primitive_cases(seed).items()]
    f, ps = model_case(seed)
    results.append(("rfop_model_total_loss", grad_check(f, ps, tol)))
    return results
