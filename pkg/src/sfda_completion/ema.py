"""Teacher correction by exponential moving average of parameters.

One step blends the current teacher (source-side) parameters toward the
student: ``new = eta * source + (1 - eta) * target``. The result is a fresh
snapshot; neither input is modified.
"""

from . import autodiff as ad


def ema_step(source, target, eta):
    """Blend two congruent parameter sets.

    Args:
        source: ParameterSet being tracked (the teacher).
        target: ParameterSet providing the update direction (the student).
        eta: retention factor in [0, 1]; 1 keeps the source, 0 copies the
            target.

    Returns:
        New ParameterSet with ``eta * source + (1 - eta) * target`` values.

    Raises:
        ValueError: if eta is outside [0, 1].
        CongruenceError: if the sets differ in names, shapes, or order; the
            message lists every mismatch.
    """
    eta = float(eta)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    source.require_congruent(target, "EMA source/target")
    blended = {
        name: eta * t.value + (1.0 - eta) * target[name].value
        for name, t in source.items()
    }
    return ad.ParameterSet.from_arrays(blended)
