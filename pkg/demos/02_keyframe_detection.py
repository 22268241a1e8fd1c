"""Train USVN on the key-frame task and look at what its heads attend to.

Run: python3 demos/02_keyframe_detection.py   (well under a minute on one CPU)

Positive clips flash a bright blob in a handful of frames; every clip also
carries a dim static distractor. Because the label depends only on which
frames are present, an order-free model is enough. After training we rank
heads by attention entropy and list each sharp head's top frames. For
positive clips these should be the key frames recorded by the generator.
"""
import logging

from usvid.encoder import EncoderConfig
from usvid.experiments import Splits
from usvid.inspection import prototype_report
from usvid.model import ModelConfig
from usvid.synthdata import GenConfig, generate, split_clips
from usvid.train import TrainConfig, fit, predict

logging.basicConfig(level=logging.INFO, format="%(message)s")

clips = split_clips(generate("keyframe", GenConfig(n_clips=200, t_range=(12, 32)), seed=0), seed=0)
splits = Splits.from_clips(clips)
print(f"{len(splits.train)} train / {len(splits.val)} val / {len(splits.test)} test clips")

cfg = ModelConfig(encoder=EncoderConfig(embed_dim=64), n_heads=8)
result = fit(cfg, TrainConfig(lr=1e-3, max_epochs=15, frames_per_clip=16), splits.train, splits.val)
test = predict(result.model, splits.test)
print(f"best epoch {result.best_epoch}, test ROC AUC {test.metric:.3f}")

val = predict(result.model, splits.val, keep_records=True)
by_id = {c.clip_id: c for c in splits.val}
for row in prototype_report(val.records, val.clip_ids, n_heads=2, k=5):
    clip = by_id[row.clip_id]
    hit = "key frame" if row.frame_index in clip.meta["key_frames"] else ""
    print(f"head {row.head:2d} (H={row.entropy:.2f}) #{row.rank}: {row.clip_id} "
          f"frame {row.frame_index:2d} score {row.score:+.2f} {hit}")
