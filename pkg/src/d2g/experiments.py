"""Comparative experiments on the toy benchmark: loss ablation, stage-2 gain,
pair-count trend, rewired-pair control, reconstruction probe and loss-path
benchmark.  Each result is cached as JSON next to the upstream artifacts."""

import hashlib
import json
import logging
import os
import statistics



from . import codec as codec_mod
from . import distiller, pairgen, pipeline
from .adversarial import build_discriminator
from .perceptual import AugmentationSpec, bench_loss, latent_rms, reconstruct_single

log = logging.getLogger(__name__)

SIZE_COUNTS = (1000, 4000, 16000)
EVAL_SEED = 12345


class Experiments:
    def __init__(self, cfg, root=None, pool_count=None):
        self.cfg = cfg
        self.cache = pipeline.ArtifactCache(cfg, root)
        # every experiment draws its pairs as a prefix of one large pool
        self.pool_count = pool_count or max(cfg.pairs.count, max(SIZE_COUNTS))

    # -------------------------------------------------------------- helpers

    def _key(self, name, sections, **params):
        blob = json.dumps({"d": self.cfg.digest(*sections), "pool": self.pool_count, **params}, sort_keys=True)
        return os.path.join(self.cache.root, "results", f"{name}-{hashlib.sha256(blob.encode()).hexdigest()[:16]}")

    def _cached(self, path, fn):
        if os.path.exists(path + ".json"):
            with open(path + ".json") as fh:
                return json.load(fh)
        result = fn()
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path + ".json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        return result

    def pairs(self, n=None):
        n = self.cfg.pairs.count if n is None else n
        return pairgen.merge_shards(self.cache.pairs(self.pool_count), n)

    def _frechet(self, G):
        held = self.cache.data()[1]
        return pipeline.frechet_of(self.cfg, G, self.cache.teacher(), self.cache.codec(), self.cache.perceptual(),
                                   held, seed=EVAL_SEED)

    _ALL = ("data", "codec", "teacher", "pairs", "perceptual", "adversarial", "distill", "eval")

    def stage1(self, loss_mode=None, seed=0, n=None, rewire_seed=None):
        """Stage-1 run; the generator is kept on disk for later stage-2 runs."""
        loss_mode = loss_mode or self.cfg.distill.loss_mode
        n = self.cfg.pairs.count if n is None else n
        path = self._key("stage1", self._ALL, mode=loss_mode, seed=seed, n=n, rewire=rewire_seed)

        def run():
            pairs = self.pairs(n)
            if rewire_seed is not None:
                pairs = pairgen.rewire_pairs(pairs, rewire_seed)
            res = pipeline.run_distill(self.cfg, self.cache.teacher(), pairs, self.cache.perceptual().latent,
                                       stage="1", loss_mode=loss_mode, seed=seed)
            distiller.save_generator(res.stage1.generator, path + ".gen")
            log.info("stage1 %s seed %d n %d probe %.4f -> %.4f", loss_mode, seed, n,
                     res.stage1.probe_start, res.stage1.probe_end)
            return {"loss_mode": loss_mode, "seed": seed, "n": n, "rewired": rewire_seed is not None,
                    "probe_start": res.stage1.probe_start, "probe_end": res.stage1.probe_end,
                    "frechet": self._frechet(res.stage1.generator), "generator": path + ".gen"}
        return self._cached(path, run)

    def stage2(self, seed=0):
        """Stage 2 started from the matching stage-1 generator."""
        first = self.stage1(seed=seed)
        path = self._key("stage2", self._ALL, seed=seed)

        def run():
            G = distiller.load_generator(first["generator"])
            teacher = self.cache.teacher()
            D = build_discriminator(teacher, self.cfg.adversarial.scales)
            tc = pipeline.train_config(self.cfg, seed=seed)
            res = distiller.distill_stage2(G, D, self.pairs(), self.cache.perceptual().latent, tc)
            distiller.save_generator(res.eval_generator, path + ".gen")
            last = res.log[-1] if res.log else {}
            return {"seed": seed, "frechet_stage1": first["frechet"],
                    "frechet_stage2": self._frechet(res.eval_generator),
                    "frechet_stage2_raw": self._frechet(res.generator),
                    "final_d_loss": last.get("d_loss"), "final_g_loss": last.get("g_loss"),
                    "generator": path + ".gen"}
        return self._cached(path, run)

    # ---------------------------------------------------------- experiments

    def loss_ablation(self, modes, seeds):
        table = {m: [self.stage1(m, s)["frechet"] for s in seeds] for m in modes}
        return {"modes": list(modes), "seeds": list(seeds), "frechet": table,
                "mean": {m: statistics.mean(v) for m, v in table.items()},
                "std": {m: statistics.stdev(v) if len(v) > 1 else 0.0 for m, v in table.items()}}

    def gan_gain(self, seeds):
        runs = [self.stage2(s) for s in seeds]
        return {"seeds": list(seeds), "stage1": [r["frechet_stage1"] for r in runs],
                "stage2": [r["frechet_stage2"] for r in runs],
                "median_stage1": statistics.median(r["frechet_stage1"] for r in runs),
                "median_stage2": statistics.median(r["frechet_stage2"] for r in runs)}

    def size_trend(self, counts=SIZE_COUNTS, seed=0):
        runs = [self.stage1(seed=seed, n=n) for n in counts]
        return {"counts": list(counts), "frechet": [r["frechet"] for r in runs]}

    def rewire_control(self, seed=0, rewire_seed=1):
        det = self.stage1(seed=seed)
        rew = self.stage1(seed=seed, rewire_seed=rewire_seed)
        return {"probe_deterministic": det["probe_end"], "probe_rewired": rew["probe_end"],
                "frechet_deterministic": det["frechet"], "frechet_rewired": rew["frechet"],
                "probe_ratio": rew["probe_end"] / det["probe_end"],
                "frechet_ratio": rew["frechet"] / det["frechet"]}

    def reconstruction(self, targets=None, iters=None, lr=None):
        p = self.cfg.perceptual
        targets = p.reconstruct_targets if targets is None else targets
        iters = p.reconstruct_iters if iters is None else iters
        lr = p.reconstruct_lr if lr is None else lr
        path = self._key("reconstruct", ("data", "codec", "perceptual"), targets=targets, iters=iters, lr=lr)

        def run():
            dist = self.cache.perceptual().latent
            held = self.cache.data()[1][0][:targets]
            latents = codec_mod.encode_batched(self.cache.codec(), held)
            spec = AugmentationSpec()
            rows = []
            for i, target in enumerate(latents):
                row = {"target": i}
                for mode in ("latentlpips", "e_latentlpips"):
                    rec, curve = reconstruct_single(mode, target, iters, seed=i, dist=dist, spec=spec, lr=lr)
                    row[mode] = latent_rms(rec, target[None])
                    row[mode + "_final_loss"] = curve[-1]
                row["ratio"] = row["e_latentlpips"] / max(row["latentlpips"], 1e-30)
                rows.append(row)
                log.info("reconstruct %s", row)
            return {"iters": iters, "lr": lr, "rows": rows}
        return self._cached(path, run)

    def loss_benchmark(self, batch=None, trials=None):
        p = self.cfg.perceptual
        batch = batch or p.bench_batch
        trials = trials or p.bench_trials
        pb, codec = self.cache.perceptual(), self.cache.codec()
        pairs = self.pairs(batch)
        z, x = pairs.z, pairs.x
        return bench_loss(pb.latent, pb.pixel, codec, z.mul(0.5) + x.mul(0.5), x, trials=trials)
