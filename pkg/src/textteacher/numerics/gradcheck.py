import numpy as np


def grad_check(model_fn, params, eps=1e-5):
    """Largest relative gap between analytic and central-difference gradients.

    ``model_fn()`` must rebuild the scalar loss from the current ``params``
    values (a list of :class:`TensorNode` leaves, float64). The error for each
    element is ``|analytic - numeric| / max(1, |numeric|)``.

    Raises:
        ValueError: bad ``eps``.
        FloatingPointError: the loss is not finite at some evaluation.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")

    def evaluate():
        val = float(model_fn().value)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss during gradient check")
        return val

    for p in params:
        p.zero_grad()
    loss = model_fn()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("non-finite loss during gradient check")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
