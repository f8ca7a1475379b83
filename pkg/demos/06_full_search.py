"""A compact end-to-end search run.

Generation by generation: train the population, prune-and-fine-tune every
member (parents are later drawn one third from unpruned, two thirds from
pruned candidates), cross and mutate, let the freshly trained predictor
drop the unpromising half of the children, and seed the survivors with
inherited weights.  Reports land in run.jsonl; the run here is smaller than
the library defaults so the demo finishes in a few minutes.

The same run is available from the command line:

    evonas search --config my.cfg --seed 0 --out runs/demo
    evonas random --budget-from runs/demo --out runs/demo-random
    evonas report runs/demo runs/demo-random --out runs/report
"""

import json
import tempfile
from pathlib import Path

from evonas.config import parse_config
from evonas.search import run_random_baseline, run_search

cfg = parse_config("""
evolve.pop_init = 8
evolve.pop_rest = 4
evolve.generations = 3
evolve.prune_samples = 8
evolve.prune_keep = 2
train.bn_calib_batches = 4
data.per_class = 30
""")

out = Path(tempfile.mkdtemp(prefix="evonas_demo_")) / "search"
print(f"searching into {out} ...")
final = run_search(cfg, seed=1, out_dir=out)

print("\ngeneration reports:")
print(f"{'gen':>3} {'mean acc':>9} {'max acc':>8} {'mean params':>12} {'cv tau':>7}")
for line in (out / "run.jsonl").read_text().splitlines():
    e = json.loads(line)
    if e["type"] == "generation":
        tau = "-" if e.get("cv_ktau") is None else f"{e['cv_ktau']:.2f}"
        print(f"{e['gen']:>3} {e['mean_acc']:>9.3f} {e['max_acc']:>8.3f} "
              f"{e['mean_params']:>12,.0f} {tau:>7}")

print(f"\nbest candidate: accuracy {final['best']['accuracy']:.3f}, "
      f"{final['best']['params']:,} params, trained-epoch budget "
      f"{final['budget_epochs']}")
print(final["best"]["spec_text"])

print("\nrandom baseline at the same training-epoch budget ...")
rnd = run_random_baseline(cfg, seed=1, budget_epochs=final["budget_epochs"],
                          out_dir=out.parent / "random")
print(f"random best: accuracy {rnd['best']['accuracy']:.3f}, "
      f"{rnd['best']['params']:,} params")
print(f"search {'beats' if final['best']['accuracy'] >= rnd['best']['accuracy'] else 'loses to'} "
      f"random at equal budget")
