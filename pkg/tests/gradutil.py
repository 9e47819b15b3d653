"""Central finite-difference gradient checks on float64 modules (inputs and parameters)."""
import torch

REL_TOL = 1e-4


def fd_relative_error(fn, tensors, n_probe=12, eps=1e-6, seed=0):
    """Max relative error between autograd and central differences of ``fn()``.

    ``fn`` closes over ``tensors`` (inputs and/or parameters, all float64).
    The output is contracted with a fixed random tensor so every output
    coordinate matters. At most ``n_probe`` entries per tensor are perturbed.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe_w = torch.randn(fn().shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn() * probe_w).sum()

    tensors = list(tensors)
    for t in tensors:
        t.requires_grad_(True)
    grads = torch.autograd.grad(scalar(), tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            idx = torch.randperm(flat.numel(), generator=gen)[:n_probe]
            scale = max(float(gflat.abs().max()), 1e-8)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = scalar().item()
                flat[i] = orig - eps
                lo = scalar().item()
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                worst = max(worst, abs(num - gflat[i].item()) / max(abs(num), abs(gflat[i].item()), scale))
    return worst
