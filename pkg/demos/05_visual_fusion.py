"""
Visual embeddings and the fusion block
======================================

Video enters as one 768-dim embedding per video frame (25 fps).  The fusion
block lets every (channel, time) column of an audio feature map attend over
the video frames and adds the result back through a normalized residual.
"""
import numpy as np

from udiffse.av_fusion import FusionBlock, attention_weights, cross_attention_fuse
from udiffse.corpus import SceneSpec, gen_synthetic_scene

scene = gen_synthetic_scene(SceneSpec(seed=2))
v = scene.visual.data.astype(np.float64)
print("embedding shape", v.shape)  # (51, 768) for 2.04 s

rng = np.random.default_rng(0)
C, F, T = 4, 32, 64
e_a = rng.standard_normal((C, F, T))
block = FusionBlock.random(C, F, embed_dim=v.shape[1], rng=rng)

w = attention_weights(block, e_a, v)
print("attention weights", w.shape, f"max |row sum - 1| = {np.abs(w.sum(-1) - 1).max():.1e}")
fused = cross_attention_fuse(block, e_a, v)
print("fused shape", fused.shape, f"mean |change| = {np.mean(np.abs(fused - e_a)):.4f}")

# With zero value projections the visual path contributes nothing at all.
block.W_v[:] = 0.0
print("zero W_v reproduces the input:", np.array_equal(cross_attention_fuse(block, e_a, v), e_a))
