"""The three mask families and the model-free reference conditions.

Coverage counts frames for Time masks, frames and bins separately for
TimeFreq masks (so their union covers more area) and area for Random masks. ``Gaps`` zeroes the masked
bins, ``Noise`` fills them with speech-shaped noise and ``LPC`` extrapolates
time gaps in the waveform. Scores are averaged over a handful of segments.
"""
from _corpus import demo_segments
from speech_inpainting.evaluation import EvalConfig, build_conditions, render_report, run_grid
from speech_inpainting.masks import MaskKind, MaskSpec, sample_mask

for kind in MaskKind:
    m = sample_mask(MaskSpec(kind, 0.3, seed=1))
    print(f"{kind.value:9s} coverage 30%: {100 * m.coverage:.1f}% of the area "
          f"in {len(m.blocks)} blocks")

_, segments = demo_segments()
conds = build_conditions([MaskKind.TIME, MaskKind.RANDOM], [0.1, 0.3],
                         scenarios=("Gaps", "Noise", "LPC"))
records = run_grid(conds, segments[:12], cfg=EvalConfig(use_pesq=False))
print(render_report(records))
