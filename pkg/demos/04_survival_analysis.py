# Discrete-time survival math: hazards from logits, the censoring-aware
# likelihood, the scalar risk, and the concordance index.

import numpy as np

import mome.numcore as nc
from mome.survival import SurvivalTarget, c_index, hazards_from_logits, nll_loss, risk_score

# Four time bins. Positive logits mean high hazard in that interval.
logits = nc.Tensor(np.array([-2.0, -0.5, 1.0, 2.0]), requires_grad=True)
curve = hazards_from_logits(logits)
print("hazards: ", np.round(curve.hazard_values, 4))
print("survival:", np.round(curve.survival_values, 4), "(non-increasing)")

# An event observed in bin 2: the loss rewards surviving bins 0..1 and
# a high hazard at bin 2. Censored at bin 2: only survival matters.
event = SurvivalTarget(bin=2, censored=False, raw_time=400.0)
censored = SurvivalTarget(bin=2, censored=True, raw_time=400.0)
print("event loss:   ", round(nll_loss(curve, event).item(), 4))
print("censored loss:", round(nll_loss(curve, censored).item(), 4))

# The loss is differentiable end to end.
nll_loss(curve, event).backward()
print("dloss/dlogits:", np.round(logits.grad, 4))

# Risk reduces the curve to one number: minus the summed survival.
print("risk score:", round(risk_score(curve), 4))

# Concordance on a tiny cohort: risks should order the event times.
targets = [
    SurvivalTarget(bin=0, censored=False, raw_time=100.0),
    SurvivalTarget(bin=1, censored=True, raw_time=250.0),
    SurvivalTarget(bin=2, censored=False, raw_time=600.0),
    SurvivalTarget(bin=3, censored=False, raw_time=900.0),
]
risks = [0.9, 0.6, 0.3, 0.1]
print("well-ordered risks -> C-index:", c_index(risks, targets))
print("inverted risks     -> C-index:", c_index([-r for r in risks], targets))
