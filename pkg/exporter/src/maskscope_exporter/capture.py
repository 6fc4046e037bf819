"""Grab a named layer's activations and their gradients in one pass.

A forward hook stores the layer output and plants a tensor hook on it;
backpropagating the chosen class logit then fills in the gradient.
Batches are fine: in eval mode each sample's logit depends only on its
own activations, so the gradient of the summed per-sample logits
separates cleanly per sample.
"""

from __future__ import annotations

import torch


class LayerNotFound(Exception):
    """The requested layer name is not among the model's modules."""


def resolve_layer(model: torch.nn.Module, name: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if name not in modules or not name:
        known = ", ".join(sorted(k for k in modules if k)) or "(none)"
        raise LayerNotFound(f"layer '{name}' not found; model has: {known}")
    return modules[name]


def capture(
    model: torch.nn.Module,
    layer_name: str,
    batch: torch.Tensor,
    targets: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Forward + backward over one batch; returns (activations, gradients, logits).

    ``targets`` selects the logit per sample; None takes each sample's
    argmax (explain the decision actually made). All three results are
    detached; activations and gradients keep the layer's [B, K, H, W]
    shape.
    """
    module = resolve_layer(model, layer_name)
    store: dict[str, torch.Tensor] = {}

    def grab(_module, _inputs, output):
        store["activation"] = output
        output.register_hook(lambda grad: store.__setitem__("gradient", grad))

    handle = module.register_forward_hook(grab)
    try:
        model.zero_grad(set_to_none=True)
        # grad must flow to the activations even if every weight is frozen
        batch = batch.detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model(batch)
            if logits.ndim != 2:
                raise ValueError(f"classifier must produce [B, classes] logits, got {tuple(logits.shape)}")
            if "activation" not in store:
                raise LayerNotFound(f"layer '{layer_name}' never ran during the forward pass")
            if targets is None:
                targets = logits.argmax(dim=1)
            else:
                targets = targets.to(device=logits.device, dtype=torch.long)
                if targets.shape != (logits.shape[0],):
                    raise ValueError("targets must hold one class index per sample")
                if int(targets.max()) >= logits.shape[1] or int(targets.min()) < 0:
                    raise ValueError("target class index outside the model's logit range")
            logits.gather(1, targets.view(-1, 1)).sum().backward()
    finally:
        handle.remove()
    if "gradient" not in store:
        raise RuntimeError(f"no gradient reached layer '{layer_name}'")
    activations = store["activation"].detach()
    if activations.ndim != 4:
        raise ValueError(f"layer '{layer_name}' output must be [B, K, H, W], got {tuple(activations.shape)}")
    return activations, store["gradient"].detach(), logits.detach()
