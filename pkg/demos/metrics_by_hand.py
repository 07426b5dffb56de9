"""The eight evaluation metrics on a small hand-checkable example.

Ten cases, four positive. At threshold 0.5 the model makes one false
positive and one false negative, so the confusion matrix is tp=3, fp=1,
tn=5, fn=1 and every operating-point metric can be checked by hand.
"""
import math

from taskcon.metrics import METRIC_LABELS, auc, auprc, evaluate_task

scores = [0.95, 0.80, 0.70, 0.60, 0.40, 0.35, 0.30, 0.20, 0.10, 0.05]
labels = [1, 1, 0, 1, 1, 0, 0, 0, 0, 0]

report = evaluate_task(scores, labels, threshold=0.5)
print("confusion:", report.counts)
for name, value in report.values().items():
    print(f"  {METRIC_LABELS[name]:<18} {value:.4f}")

# MCC from its definition, for comparison with the library value.
tp, fp, tn, fn = 3, 1, 5, 1
mcc = (tp * tn - fp * fn) / math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
print(f"\nMCC by hand: {mcc:.4f}")

# AUC counts ordered (positive, negative) pairs: 22 of the 24 pairs are ranked correctly.
print(f"AUC: {auc(scores, labels):.4f} (22/24 = {22 / 24:.4f})")
print(f"AUPRC: {auprc(scores, labels):.4f}")

# A single-class set leaves ranking metrics undefined rather than guessing.
single = evaluate_task([0.2, 0.7, 0.9], [1, 1, 1])
print("single-class undefined:", single.undefined)
