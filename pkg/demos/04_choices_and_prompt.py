# %% [markdown]
# Candidate forecasts and the selector prompt
#
# Each sensor gets twelve candidates: the two branch outputs plus five
# adjusted copies of each. A selector picks one per sensor.

# %%
import numpy as np

from leaf.choices import build_choice_set
from leaf.selector import PromptContext, build_prompt, heuristic_select, oracle_select, parse_selection

steps = np.arange(12)
graph = 120 + 4 * steps
hyper = 130 - 2 * steps
cs = build_choice_set({"graph": graph, "hypergraph": hyper}, vertex=0)
for c in cs.choices:
    print(f"{c.label:2d}  {c.describe():55s} {np.round(c.values[:4], 1)}")

# %%
times = np.datetime64("2024-01-03T07:00") + np.arange(12) * np.timedelta64(5, "m")
history = np.linspace(95, 118, 12) + np.array([0.4, -0.6, 0.2] * 4)
ctx = PromptContext("S000", history, times, times[-1] + np.timedelta64(5, "m"),
                    times[-1] + np.timedelta64(60, "m"), location_text="Ring road, north side",
                    lat_lon=(37.82, -122.42))
print(build_prompt(ctx, cs))

# %% [markdown]
# Answers are parsed leniently. The heuristic picks the candidate that
# continues the last observation best, and the oracle cheats with the truth.

# %%
for answer in ("Option 7, traffic keeps building", "3", "I cannot decide"):
    try:
        print(repr(answer), "->", parse_selection(answer, len(cs)))
    except ValueError as exc:
        print(repr(answer), "->", type(exc).__name__)
truth = graph * 1.04
print("heuristic label:", heuristic_select(cs, history).chosen_label)
print("oracle label:", oracle_select(cs, truth).chosen_label)
