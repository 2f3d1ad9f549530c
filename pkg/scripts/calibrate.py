"""Calibration probe for the acceptance training runs (not part of the package)."""
import sys
import time

import numpy as np

from finegrain.config import RunConfig
from finegrain.model import VLModel
from finegrain import synthdata as sd, evalharness as ev
from finegrain.objectives import SgdOptimizer, training_step
from finegrain.seeding import rng_for

ALL = "captions,object_labels,attribute_labels,region_descriptions"


def train_and_eval(sources, use_vma, use_bbox, seed, steps, lr, caption_count=48,
                   det_scenes=32, eval_n=25):
    cfg = RunConfig(seed=seed, steps=steps, cadence=steps, patch_grid=4, hidden_dim=32,
                    vision_layers=2, text_layers=2, cross_layers=2, heads=4,
                    proj_dim=16, mlp_dim=64, caption_batch=4, detection_batch=4,
                    caption_count=caption_count, detection_scene_count=det_scenes,
                    sources=sources, use_vma=use_vma, use_bbox=use_bbox,
                    learning_rate=lr, eval_per_subtask=eval_n, eval_seed=5000)
    model = VLModel(cfg.model_config(), seed=seed)
    ablation = cfg.ablation_config()
    opt = SgdOptimizer(model.parameters(), lr=lr, clip_norm=1.0)
    batches = sd.sampler_for_sources(seed=cfg.data_seed, sources=sorted(cfg.source_set()),
                                     steps=steps, caption_count=caption_count,
                                     detection_scene_count=det_scenes,
                                     caption_batch=4, detection_batch=4)
    t0 = time.time()
    for i, b in enumerate(batches):
        bundle = training_step(model, b, ablation, opt, rng_for(seed, "step", i + 1))
    manifest = ev.default_manifest(5000, eval_n, 4, 0)
    rep = ev.run_benchmark(model, manifest)
    return rep.metrics, time.time() - t0, bundle.total


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
    lr = float(sys.argv[2]) if len(sys.argv) > 2 else 0.05
    seeds = [1, 2, 3]
    arms = {
        "A": ("captions", False, False),
        "full": (ALL, True, True),
        "od": ("captions,object_labels", True, True),
        "rd": ("captions,region_descriptions", True, True),
    }
    results = {name: [] for name in arms}
    for seed in seeds:
        for name, (sources, vma, bbox) in arms.items():
            metrics, dt, loss = train_and_eval(sources, vma, bbox, seed, steps, lr)
            results[name].append(metrics)
            print(f"seed {seed} {name:5s} rel={metrics['relation_statement']:.3f} "
                  f"foil={metrics['foil_avg']:.3f} svo_verb={metrics['svo_verb']:.3f} "
                  f"wino_g={metrics['relation_swap_group']:.3f} "
                  f"loss={loss:.2f} {dt:.0f}s", flush=True)
    def med(name, key):
        return float(np.median([m[key] for m in results[name]]))
    print(f"\nmedians over {len(seeds)} seeds (steps={steps}, lr={lr}):")
    print(f"  relation_statement: A={med('A','relation_statement'):.3f} "
          f"full={med('full','relation_statement'):.3f}  (need full >= A)")
    print(f"  foil_avg: od={med('od','foil_avg'):.3f} rd={med('rd','foil_avg'):.3f} "
          f"(need rd >= od)")


if __name__ == "__main__":
    main()
