"""
Heatmap targets and peak extraction
===================================

Render Gaussian targets for a handful of vehicle centres, then recover the
centres with NMS and with Otsu blob centroids. Two vehicles 2.5 px apart show
why NMS copes with queued traffic and blob segmentation does not.
"""

import numpy as np

from satvdet import evaluation, postprocess, targets

# three isolated vehicles and a queued pair
points = np.array([[10.0, 12.0], [40.0, 20.0], [25.0, 50.0], [50.0, 50.0], [52.5, 50.0]])

spec = targets.target_spec_for("foveanet4sat", sigma=1.0)
hm = targets.render(points, spec, (64, 64))
print("max target", hm.max(), "at", np.unravel_index(hm.argmax(), hm.shape))

nms = postprocess.as_array(postprocess.nms_detect(hm, alpha_n=0.35))
print("nms peaks\n", nms)

otsu = postprocess.as_array(postprocess.otsu_detect(hm, alpha_o=3.5))
print("otsu centroids\n", np.round(otsu, 2))

# score both against the truth at theta = 4 px
for name, det in (("nms", nms), ("otsu", otsu)):
    rep = evaluation.match(det, points, theta=4.0)
    print(f"{name:5s} tp={rep.tp} fp={rep.fp} fn={rep.fn} F1={rep.f1:.3f}")

# the summed target used by the pooled network saturates when vehicles overlap
sum_spec = targets.target_spec_for("foveanet", sigma=1.0)
crowd = targets.heatmap_sum([(8, 8)] * 8, targets.TargetSpec(1.0, 0, "sum", False), (16, 16))
print("8 coincident peaks clip to", crowd[8, 8], "; pooled target shape", targets.render(points, sum_spec, (64, 64)).shape)
