"""Train a toy informed inpainter and compare it against zero-filled gaps.

This is a scaled-down run (quarter-width U-Net, pixel loss, a few hundred
segments) that finishes in a few minutes on a CPU. It shows the training
and evaluation plumbing rather than converged quality.
"""
import time

from _corpus import demo_segments
from speech_inpainting import dsp, training
from speech_inpainting.evaluation import Condition, EvalConfig, run_condition
from speech_inpainting.masks import MaskKind

t0 = time.time()
_, train = demo_segments(n_speakers=4, utterances=10, seed=1, split="train")
_, held = demo_segments(n_speakers=2, utterances=4, seed=2)
train = [s for _, s in train]
stats = dsp.compute_stats(dsp.analyze(s)[0] for s in train)
data = training.segment_magnitudes(train, stats)
print(f"{len(data)} training segments, {len(held)} held-out")

cfg = training.TrainConfig(epochs=3, lr=1e-3, batch_size=8, loss="Pixel", filter_scale=0.25)
result = training.train_inpainter(cfg, data)
losses = [h["loss"] for h in result.history]
print(f"pixel loss {losses[0]:.3f} -> {losses[-1]:.3f} over {len(losses)} steps")

ecfg = EvalConfig(use_pesq=False, lws_iterations=50, composite=True)
for label in ("Gaps", "Informed"):
    rec = run_condition(Condition(MaskKind.TIME_FREQ, 0.2, label), held[:20],
                        {"Informed": result.model}, stats, ecfg)
    print(f"{label:9s} STOI {rec.stoi_mean:.3f}")
print(f"done in {time.time() - t0:.0f} s")
