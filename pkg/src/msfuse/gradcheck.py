"""Central-difference gradient checks for every trainable component."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .ehr import CHANNEL_SPECS, EHRChannel
from .fusion import FusionDecoder
from .image import ResidualEncoder3D, center_intensity
from .metric import triplet_loss
from .text import MessagePassingStep, Readout, build_graph

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradResult:
    suite: str
    tensors: int
    entries: int
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite:<22} tensors={self.tensors:<3} entries={self.entries:<5} max_rel_err={self.max_rel_error:.3e}"


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(loss_fn, named_tensors, step=STEP, max_entries=64, seed=0):
    """Compare autograd against central differences on (a sample of) each tensor's entries.

    ``loss_fn()`` must return a float64 scalar and be deterministic. Returns
    (worst relative error, tensor count, entry count).
    """
    rng = np.random.default_rng(seed)
    tensors = [(n, t) for n, t in named_tensors if t.requires_grad]
    for _, t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = {n: t.grad.detach().clone() for n, t in tensors}
    worst, entries = 0.0, 0
    with torch.no_grad():
        for name, t in tensors:
            flat = t.view(-1)
            picks = np.arange(flat.numel())
            if flat.numel() > max_entries:
                picks = rng.choice(flat.numel(), size=max_entries, replace=False)
            num, ana = [], []
            for j in picks:
                orig = flat[j].item()
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                num.append((up - down) / (2 * step))
                ana.append(analytic[name].view(-1)[j].item())
            entries += len(picks)
            worst = max(worst, relative_error(ana, num))
    return worst, len(tensors), entries


def _double(module):
    return module.double()


def suite_ehr(seed=0):
    torch.manual_seed(seed)
    ch = _double(EHRChannel(CHANNEL_SPECS["labs"], dropout=0.0))
    gen = torch.Generator().manual_seed(seed)
    rows = torch.randn(2, 5, 54, generator=gen, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=torch.bool)
    w = torch.randn(2, 54, generator=gen, dtype=torch.float64)

    def loss():
        emb, _ = ch(rows, mask)
        return (emb * w).sum()

    worst, n, e = check_gradients(loss, [("rows", rows), *ch.named_parameters()], seed=seed)
    return GradResult("ehr-channel", n, e, worst)


@torch.no_grad()
def relu_margin(enc, x):
    """Smallest |pre-activation| over every ReLU in the image encoder."""
    pre = enc.stem(center_intensity(x))
    worst = pre.abs().min()
    h = torch.relu(pre)
    for blk in enc.blocks:
        inner = blk.conv1(h)
        total = h + blk.conv2(torch.relu(inner))
        worst = torch.minimum(worst, torch.minimum(inner.abs().min(), total.abs().min()))
        h = torch.relu(total)
    return float(worst)


def suite_image(seed=0):
    torch.manual_seed(seed)
    enc = _double(ResidualEncoder3D(width=3, embed_dim=6, blocks=1))
    gen = torch.Generator().manual_seed(seed)
    # Redraw until no ReLU input lies within a few steps of its kink, where
    # central differences are meaningless.
    for _ in range(100):
        x = torch.rand(4, 1, 8, 8, 8, generator=gen, dtype=torch.float64)
        if relu_margin(enc, x) > 10 * STEP:
            break
    labels = torch.tensor([True, False, True, False])
    anchor = torch.randn(6, generator=gen, dtype=torch.float64)

    def loss():
        # Large margin keeps every hinge term active, away from the kink.
        return triplet_loss(enc(x), labels, anchor, margin=50.0)

    worst, n, e = check_gradients(loss, list(enc.named_parameters()), seed=seed)
    return GradResult("image-block+triplet", n, e, worst)


def suite_text(seed=0):
    torch.manual_seed(seed)
    dim = 6
    step1, step2 = _double(MessagePassingStep(dim)), _double(MessagePassingStep(dim))
    readout = _double(Readout(dim))
    rng = np.random.default_rng(seed)
    tokens = [f"t{int(v)}" for v in rng.integers(0, 8, size=30)]
    g = build_graph(tokens, 10)
    a = torch.as_tensor(g.adjacency).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    h0 = torch.randn(1, g.n, dim, generator=gen, dtype=torch.float64, requires_grad=True)
    word = torch.zeros(1, g.n, dtype=torch.bool)
    word[0, :len(g.words)] = True
    w = torch.randn(dim, generator=gen, dtype=torch.float64)

    def loss():
        h = step2(a, step1(a, h0))
        u, _ = readout(h, word)
        return (u[0] * w).sum()

    params = [("h0", h0), *(("s1." + k, v) for k, v in step1.named_parameters()),
              *(("s2." + k, v) for k, v in step2.named_parameters()), *readout.named_parameters()]
    worst, n, e = check_gradients(loss, params, seed=seed)
    return GradResult("text-propagate+readout", n, e, worst)


def suite_decoder(seed=0):
    torch.manual_seed(seed)
    dec = _double(FusionDecoder(input_dim=5, hidden=4, layers=2, attention_channels=2, demographics_dim=9, k=3))
    gen = torch.Generator().manual_seed(seed)
    e = torch.randn(3, 3, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    demo = torch.randn(3, 9, generator=gen, dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)

    def loss():
        return F.binary_cross_entropy_with_logits(dec(e, demo), y)

    worst, n, en = check_gradients(loss, [("E", e), *dec.named_parameters()], seed=seed)
    return GradResult("decoder+bce", n, en, worst)


SUITES = {"ehr": suite_ehr, "image": suite_image, "text": suite_text, "decoder": suite_decoder}


def run_all(seed=0):
    return [fn(seed) for fn in SUITES.values()]
