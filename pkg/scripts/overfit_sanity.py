"""Single-patch overfit check: loss must collapse fast on a memorizable input.

A network that cannot drive its training Dice loss near zero on one repeated
patch has a wiring bug somewhere (loss, gradients, or optimizer); this is the
quickest end-to-end smoke test of the training stack.
"""

import argparse

import numpy as np

from fuseseg.psnn import PSNNConfig, TrainConfig, train_stream
from fuseseg.volio import PatchKind, PatchSample


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-2)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 16, 16)).astype(np.float32)
    label = np.zeros((16, 16, 16), bool)
    label[4:12, 4:12, 4:12] = True
    x[label] += 3.0
    patch = PatchSample([x], label, (8, 8, 8), PatchKind.POSITIVE)

    cfg = PSNNConfig(in_channels=1, num_blocks=2, convs_per_block=(2, 2),
                     channels_per_block=(4, 8))
    tc = TrainConfig(epochs=args.steps, batch_size=1, learning_rate=args.lr,
                     patch_size=(16, 16, 16), rotation_max_deg=0.0)
    _, history = train_stream([patch], cfg, tc)
    losses = history["train_loss"]
    for step in (0, len(losses) // 4, len(losses) // 2, len(losses) - 1):
        print(f"step {step:4d}: loss {losses[step]:.4f}")
    final = float(np.mean(losses[-5:]))
    verdict = "OK" if final < 0.2 else "NOT CONVERGING"
    print(f"mean of last 5 steps: {final:.4f} -> {verdict}")


if __name__ == "__main__":
    main()
