"""
Equal error rate and the cross-language report
==============================================

Scores at or above a threshold are accepted.  The EER is where the false
accept and false reject rates meet on the ROC sweep.
"""

import numpy as np

from rfop.metrics import EvalMatrix, compute_eer, overall_score, reconcile_overall, roc_curve

# three same-identity and three different-identity trials
scores = np.array([0.9, 0.6, 0.4, 0.7, 0.3, 0.2])
labels = np.array([1, 1, 1, 0, 0, 0])
for pt in roc_curve((scores, labels)):
    print(f"threshold {pt.threshold:>5}  far {pt.far:.3f}  frr {pt.frr:.3f}")
print("EER %.2f%%" % compute_eer((scores, labels)).eer_percent)

# perfectly separated and indistinguishable classes
print(compute_eer((np.array([0.8, 0.9, 0.1, 0.2]), np.array([1, 1, 0, 0]))).eer_percent)
print(compute_eer((np.array([0.1, 0.5, 0.9, 0.9, 0.5, 0.1]), np.array([1, 1, 1, 0, 0, 0]))).eer_percent)

# the overall score is the mean of the four train/test cells
m = EvalMatrix({("en", "en"): 25.4, ("en", "de"): 41.1, ("de", "en"): 34.7, ("de", "de"): 31.2})
print(m.table())
print(m.to_csv())

# a printed overall that does not match its cells is flagged, not rejected
fop = [35.3, 48.0, 45.1, 37.9]
print(overall_score(fop))
print(reconcile_overall(fop, 41.5))
