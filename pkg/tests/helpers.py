"""Shared test utilities: batch builders and a finite-difference harness."""

import numpy as np
import torch

from ddit.objectives import TrainBatch


def make_batch(batch=2, channels=3, side=8, caption_len=4, dtype=torch.float32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return TrainBatch(
        z0=torch.randn(batch, channels, side, side, generator=gen, dtype=dtype),
        z_cond=torch.randn(batch, channels, side, side, generator=gen, dtype=dtype),
        caption_tokens=torch.randint(1, 16, (batch, caption_len), generator=gen),
        modality=torch.randint(0, 2, (batch,), generator=gen),
        sample_ids=tuple(range(batch)),
    )


def perturb_parameters(model, scale=0.02, seed=0):
    """Move every parameter off its init point so all gradient paths are live."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def grad_or_zeros(p):
    """Parameters outside the loss graph (e.g. the last block's discarded
    text-stream output path) carry None grads; treat them as zeros."""
    return p.grad if p.grad is not None else torch.zeros_like(p)


def finite_difference_check(model, loss_fn, fraction=0.01, h=1e-4, seed=0):
    """Compare autograd gradients with central differences on a parameter subsample.

    Returns a list of (name, flat_index, analytic, fd) tuples.  loss_fn must
    be a deterministic closure over the model's current parameters.
    """
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    results = []
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        grad = grad_or_zeros(p).view(-1)
        n = flat.numel()
        k = min(n, max(1, int(round(n * fraction))))
        for i in rng.choice(n, size=k, replace=False):
            i = int(i)
            analytic = float(grad[i])
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            results.append((name, i, analytic, (up - down) / (2.0 * h)))
    return results


def assert_gradients_match(results, rtol=1e-4, floor=1e-7):
    """Entries below `floor` are inside central-difference roundoff at
    h=1e-4 double precision, so they are held to an absolute bound."""
    worst = 0.0
    for name, i, analytic, fd in results:
        denom = max(abs(analytic), abs(fd))
        if denom <= floor:
            assert abs(analytic - fd) < 1e-10, f"{name}[{i}]: {analytic} vs {fd}"
            continue
        rel = abs(analytic - fd) / denom
        worst = max(worst, rel)
        assert rel < rtol, f"{name}[{i}]: analytic {analytic} vs fd {fd} (rel {rel:.2e})"
    return worst
