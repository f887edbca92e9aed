"""Independent reference checks shared by the unit and acceptance tests."""

import torch

from tprog.model import gradients, loss

FAMILIES = {
    "gate": ("cat_gates", "num_gates", "num_value_gate", "cat_mlp_gates", "num_mlp_gates"),
    "predicate": ("cat_pred", "num_pred"),
    "mlp": ("cat_w1", "cat_b1", "cat_w2", "cat_b2", "num_w1", "num_b1", "num_w2", "num_b2"),
    "embedding": ("embed_logits",),
    "classifier": ("classifier",),
}


def family(param_name: str) -> str:
    leaf = param_name.split(".")[-1]
    for fam, leaves in FAMILIES.items():
        if leaf in leaves:
            return fam
    raise KeyError(param_name)


def finite_difference_errors(model, batch, seed, per_family=50, h=1e-4, tau=1.0):
    """Worst relative error between autograd and central differences, per family.

    The loss is evaluated with the same Gumbel noise every time.  A coordinate
    whose one-sided slopes disagree sits on a ReLU kink, where the central
    difference is not a derivative estimate; it is replaced by another one.
    Returns ``{family: (worst_error, n_checked)}``.
    """

    def value():
        with torch.no_grad():
            return float(loss(model, batch, tau, torch.Generator().manual_seed(seed)))

    grads = gradients(model, batch, tau, torch.Generator().manual_seed(seed))
    base = value()
    rng = torch.Generator().manual_seed(seed + 7)
    pool = []
    for name, p in model.named_parameters():
        pool += [(family(name), name, i) for i in range(p.numel())]
    order = torch.randperm(len(pool), generator=rng).tolist()
    params = dict(model.named_parameters())
    out: dict[str, tuple[float, int]] = {}
    for j in order:
        fam, name, i = pool[j]
        worst, n = out.get(fam, (0.0, 0))
        if n >= per_family:
            continue
        flat = params[name].data.view(-1)
        old = flat[i].item()
        flat[i] = old + h
        up = value()
        flat[i] = old - h
        down = value()
        flat[i] = old
        right, left = (up - base) / h, (base - down) / h
        if abs(right - left) > 1e-2 * max(abs(right), abs(left), 1e-3):
            continue
        fd = (up - down) / (2 * h)
        an = grads[name].view(-1)[i].item()
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        out[fam] = (max(worst, err), n + 1)
    return out
