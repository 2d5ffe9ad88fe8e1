"""Plain textbook attack loops, kept independent of the engine on purpose."""

import torch


def reference_pgd(x_o, c_o, model, loss_fn, eps, step, iters):
    delta = torch.zeros_like(x_o)
    for _ in range(iters):
        delta = delta.detach().requires_grad_(True)
        loss = loss_fn(model(x_o + delta), c_o)
        (grad,) = torch.autograd.grad(loss, delta)
        delta = (delta.detach() + step * grad.sign()).clamp(-eps, eps)
        delta = torch.minimum(torch.maximum(delta, -x_o), 1 - x_o)
    return torch.clamp(x_o + delta, 0, 1)


def reference_mifgsm(x_o, c_o, model, loss_fn, eps, step, iters, mu=1.0):
    delta = torch.zeros_like(x_o)
    momentum = torch.zeros_like(x_o)
    for _ in range(iters):
        delta = delta.detach().requires_grad_(True)
        loss = loss_fn(model(x_o + delta), c_o)
        (grad,) = torch.autograd.grad(loss, delta)
        l1 = torch.stack([g.abs().sum() for g in grad]).clamp_min(1e-12)
        momentum = mu * momentum + grad / l1.view(-1, 1, 1, 1)
        delta = (delta.detach() + step * momentum.sign()).clamp(-eps, eps)
        delta = torch.minimum(torch.maximum(delta, -x_o), 1 - x_o)
    return torch.clamp(x_o + delta, 0, 1)
