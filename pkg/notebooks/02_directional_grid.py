# %% [markdown]
# Run the directional grid from configs/toy_directional.json, print the
# accuracy table and the claim verdicts. Reruns reuse the results store.

# %%
import logging
from pathlib import Path

from ddsmooth.runner import check_directional_claims, emit_report, load_config, run_grid

logging.basicConfig(level=logging.INFO)
root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "toy_directional.json")
records = run_grid(cfg, root / cfg.output_dir / "results.jsonl")

# %%
print(emit_report(records, "markdown"))
for claim in check_directional_claims(records):
    print("PASS" if claim.passed else "FAIL", claim.claim_id, claim.observed)
