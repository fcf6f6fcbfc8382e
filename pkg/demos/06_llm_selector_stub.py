# %% [markdown]
# Talking to a chat-completions endpoint
#
# The selector sends one request per sensor and reads back an option number.
# Here a local stub stands in for the model server. Swap the stub client for
# a real `base_url` (and export LEAF_LLM_API_KEY) to use a hosted model.

# %%
import json

import httpx
import numpy as np

from leaf.choices import build_choice_sets
from leaf.selector import LlmEndpointConfig, LlmSelector, PromptContext


def stub(request: httpx.Request) -> httpx.Response:
    prompt = json.loads(request.content)["messages"][1]["content"]  # the original user prompt
    flows = [int(v) for v in prompt.split("Flows: ")[1].splitlines()[0].split(", ")]
    answer = "Option 3" if flows[-1] > flows[0] else "not sure"
    return httpx.Response(200, json={"choices": [{"message": {"content": answer}}]})


cfg = LlmEndpointConfig(base_url="http://stub.local/v1", model_name="any-model", max_concurrent_requests=4)
selector = LlmSelector(cfg, client=httpx.Client(transport=httpx.MockTransport(stub)), log_path="runs/stub_llm.ndjson")

rng = np.random.default_rng(0)
sets = build_choice_sets({"graph": rng.uniform(50, 150, (3, 12)), "hypergraph": rng.uniform(50, 150, (3, 12))})
times = np.datetime64("2024-01-03T16:00") + np.arange(12) * np.timedelta64(5, "m")
contexts = [
    PromptContext(f"S00{i}", np.linspace(80, 80 + slope, 12), times, times[-1] + np.timedelta64(5, "m"),
                  times[-1] + np.timedelta64(60, "m"))
    for i, slope in enumerate((30, -20, 10))
]

# %% [markdown]
# Rising sensors get option 3. The falling one gets an unreadable answer,
# is asked again, and finally falls back to the mean of the two base
# forecasts.

# %%
for r in selector.select(sets, contexts):
    print(f"sensor {r.vertex}: label={r.chosen_label} fallback={r.fallback_used} attempts={r.attempts}")
selector.close()
