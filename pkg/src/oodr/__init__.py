"""Normal-vs-abnormal screening toolkit.

Pipeline: deterministic class quartering -> (optional image augmentation)
-> metric-learned embedding head -> LOF novelty scoring against sampled
normal reference groups -> ROC/AUC/FPR@TPR=1 evaluation, orchestrated over
fourfold cross-validation scenario templates.
"""

__version__ = "0.1.0"
