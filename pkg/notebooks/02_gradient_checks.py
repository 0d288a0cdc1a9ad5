"""
Finite-difference checks of the hand-written backward passes
============================================================

Every layer of the unrolled network has an analytic gradient: the signal
model, the convolutional prior, the two implicit solver layers and the whole
pipeline. Each is compared with central differences along random directions.
"""

from qpinqi.gradcheck import TARGETS, run

for target in TARGETS:
    report = run(target)
    print(report.table())
    print()

# The end-to-end check also covers the gradient-descent comparison mode, whose
# inner steps are differentiated by unrolling rather than implicitly.
from qpinqi.gradcheck import check_endtoend
from qpinqi.pinqi import PinqiConfig

print(check_endtoend(eps=1e-7, cfg=PinqiConfig.ablation("e", n_iter=2), n_entries=4).table())
