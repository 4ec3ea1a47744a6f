"""Finite-difference check of the full training loss."""
import numpy as np

from pecnet import autodiff as ad
from pecnet.autodiff import Tape
from pecnet.trainer import forward_train

from oracles import rel_error


def activation_pattern(tape):
    out = []
    for r in tape.records:
        if r.op == "relu":
            out.append(r.out.data > 0)
        elif r.op == "clamp":
            out.append(r.out.data == r.inputs[0].data)
    return out


def full_loss_gradcheck(batch, model, eps, h=1e-5, per_tensor=12, rounds=2, seed=0, floor=1e-7):
    """Per-tensor relative error between backward() and central differences.

    A coordinate whose stencil flips any ReLU or clamp is redrawn, since the loss
    is not differentiable across it.  ``floor`` keeps tensors with near-zero
    gradients from being judged on finite-difference roundoff alone.
    """

    def run():
        with Tape() as tape:
            total = forward_train(batch, model, eps, rounds=rounds).total
        return tape, total

    tape, total = run()
    base = activation_pattern(tape)
    grads = {t.name: g for t, g in ad.backward(tape, total).items()}
    assert set(grads) == set(model.tensors)

    def probe(flat, i, x):
        flat[i] = x
        tape, total = run()
        smooth = all(np.array_equal(a, b) for a, b in zip(activation_pattern(tape), base))
        return float(total.data), smooth

    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in model.tensors.items():
        flat = t.data.reshape(-1)
        analytic, numeric = [], []
        for i in rng.permutation(flat.size):
            if len(analytic) == per_tensor:
                break
            old = flat[i]
            fp, ok_p = probe(flat, i, old + h)
            fm, ok_m = probe(flat, i, old - h)
            flat[i] = old
            if ok_p and ok_m:
                analytic.append(grads[name].reshape(-1)[i])
                numeric.append((fp - fm) / (2 * h))
        if len(analytic) < min(3, flat.size):
            raise AssertionError(f"{name}: too few smooth coordinates")
        errors[name] = rel_error(np.array(analytic), np.array(numeric), floor=floor)
    return errors
