"""
Rendering a small Gaussian set and pulling gradients back through it
=====================================================================

A synthetic scene is rendered in color and as a segmentation image, then
one backward pass gives gradients for every per-Gaussian attribute.
"""
import numpy as np

from coseg import render, render_backward, synth

# a seeded scene: 5 objects of 20 Gaussians on a circle, 12 ring cameras
scene = synth.generate(n_objects=5, gaussians_per_object=20, n_views=12, seed=0)
cam = scene.cameras[0]
gs = scene.gaussians

# color render; the recorded pass keeps blend weights for the backward pass
out = render(cam, gs, "color")
print("image", out.image.shape, "coverage", float(out.alpha_acc.mean()))

# the segmentation render carries a void channel equal to 1 - accumulated alpha
seg = render(cam, gs, "seg", record=False).image
print("seg channels", seg.shape[-1], "void share", float(np.mean(seg.argmax(-1) == 5)))

# gradient of a squared error against a shifted target
target = np.clip(out.image + 0.05, 0.0, 1.0)
grads = render_backward(out, 2 * (out.image - target), gs)
for name in ("positions", "rotations", "log_scales", "opacity_raw", "payload"):
    g = getattr(grads, name)
    print(f"{name:12s} {str(g.shape):10s} norm {np.linalg.norm(g):.4f}")
