"""Cross-engine verification of converted weights.

Runs random slices through the source model (a callable, typically a
Keras model's predict function) and through the consuming engine's
forward pass on the converted container, and reports the worst absolute
output deviation.  Conversions must agree to 1e-5.
"""

from dataclasses import dataclass

import numpy as np

from headseg.unet import load_model

THRESHOLD = 1e-5


class VerificationError(Exception):
    pass


@dataclass
class VerificationResult:
    max_abs_deviation: float
    n_trials: int
    threshold: float = THRESHOLD

    @property
    def passed(self):
        return self.max_abs_deviation < self.threshold


def verify_conversion(
    source_predict,
    container_path,
    n_trials=10,
    seed=0,
    size=32,
    threshold=THRESHOLD,
    worst_input_path=None,
):
    """Compare source and converted models on random slices.

    source_predict: callable (image (1,H,W), coords (3,H,W)) -> (C,H,W)
    probabilities in the consuming engine's channel-first layout.  Raises
    VerificationError when the deviation exceeds `threshold`; the worst
    input is saved to `worst_input_path` (npz) when given.
    """
    model = load_model(container_path)
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_pair = None
    for _ in range(n_trials):
        image = rng.random((1, size, size), dtype=np.float32)
        coords = rng.uniform(-1, 1, (3, size, size)).astype(np.float32)
        ours = model.forward(image, coords)
        theirs = np.asarray(source_predict(image, coords), dtype=np.float32)
        if theirs.shape != ours.shape:
            raise VerificationError(
                f"source output shape {theirs.shape} vs engine {ours.shape}"
            )
        dev = float(np.max(np.abs(ours - theirs)))
        if dev > worst:
            worst = dev
            worst_pair = (image, coords)
    result = VerificationResult(max_abs_deviation=worst, n_trials=n_trials, threshold=threshold)
    if not result.passed:
        if worst_input_path and worst_pair is not None:
            np.savez(worst_input_path, image=worst_pair[0], coords=worst_pair[1])
            saved = f"; worst input saved to {worst_input_path}"
        else:
            saved = ""
        raise VerificationError(
            f"max abs deviation {worst:.3e} exceeds {threshold:.1e} "
            f"over {n_trials} trials{saved}"
        )
    return result
