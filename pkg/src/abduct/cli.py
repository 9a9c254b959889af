"""Command-line entry point for the abduction pipeline.

Subcommands mirror the pipeline stages: ingest, gen-hypotheses,
gen-negatives, train-contrast, select, train-stage1, train-stage2, infer,
evaluate. A JSON config file supplies all knobs; a handful of flags
(--k, --alpha, --seed, --run-dir, --mock-llm) override it for quick
experiments. Every stage is seeded and rerunnable: identical config plus
seed reproduces identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import contrast as contrast_mod
from . import data as data_mod
from . import embed, hypgen, metrics, reasoner, training
from .hypgen import FLAG_UNSCORED, Hypothesis, HypothesisSet


@dataclass
class RunConfig:
    # paths
    dataset_root: str = ""
    run_dir: str = "runs/default"
    split: str = "train"
    mock_llm: str | None = None
    # generation
    endpoint: str | None = None
    model_name: str = "gpt-4o-mini"
    timeout: float = 30.0
    max_retries: int = 2
    temperature: float = 1.4
    l_candidates: int = 10
    m_negatives: int = 100
    # selection / conditions
    k: int = 3
    tau: float = 0.07
    m_frames: int = 4
    placeholder_len: int | None = None
    # dims
    d_joint: int = 256
    d_txt: int = 128
    d_cond: int = 64
    d_model: int = 64
    reasoner_heads: int = 2
    reasoner_layers: int = 2
    reasoner_ffn: int = 128
    max_dec_len: int = 64
    latent_channels: int = 4
    latent_size: int = 32
    base_channels: int = 32
    timesteps: int = 1000
    snr_gamma: float = 5.0
    # schedules
    alpha: float = 5.0
    contrast_epochs: int = 10
    contrast_lr: float = 1e-3
    stage1_epochs: int = 2
    stage1_lr: float = 1e-4
    stage2_epochs: int = 1
    stage2_lr: float = 1e-5
    seed: int = 0
    query: str = "What happens at the [MASK] position?"

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def apply_overrides(self, args: argparse.Namespace) -> "RunConfig":
        updates = {}
        for flag, key in (("k", "k"), ("alpha", "alpha"), ("seed", "seed"),
                          ("run_dir", "run_dir"), ("mock_llm", "mock_llm")):
            value = getattr(args, flag, None)
            if value is not None:
                updates[key] = value
        return dataclasses.replace(self, **updates)

    def client(self) -> hypgen.ChatClient:
        endpoint = f"mock:{self.mock_llm}" if self.mock_llm else self.endpoint
        if not endpoint:
            raise ValueError("no LLM endpoint configured; set endpoint or --mock-llm")
        return hypgen.ChatClient(endpoint=endpoint, model_name=self.model_name,
                                 timeout=self.timeout, max_retries=self.max_retries)


# ---------------------------------------------------------------------------
# Path helpers
# ---------------------------------------------------------------------------

def _split_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run_dir) / "splits" / cfg.split


def _hyp_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run_dir) / "hypotheses" / cfg.split


def _neg_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run_dir) / "negatives" / cfg.split


def _selected_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run_dir) / "selected" / cfg.split


def _load_samples(cfg: RunConfig) -> list:
    split_dir = _split_dir(cfg)
    samples = data_mod.load_split(split_dir)
    if not samples:
        raise ValueError(f"no samples in {split_dir}; run ingest first")
    return samples


def _text_featurizer(cfg: RunConfig):
    return lambda text: embed.text_features(text, dim=cfg.d_txt, seed=cfg.seed)


def _load_selected(cfg: RunConfig, samples) -> dict[str, HypothesisSet]:
    selected = {}
    sel_dir = _selected_dir(cfg)
    for sample in samples:
        path = sel_dir / f"{sample.sample_id}.json"
        if path.exists():
            selected[sample.sample_id] = hypgen.load_hypothesis_set(path)
    return selected


def _build_bundle(cfg: RunConfig, tokenizer: reasoner.ByteTokenizer) -> training.ModelBundle:
    torch.manual_seed(cfg.seed)
    backbone = reasoner.ReasonerBackbone(reasoner.ReasonerConfig(
        vocab_size=tokenizer.vocab_size, d_model=cfg.d_model,
        heads=cfg.reasoner_heads, enc_layers=cfg.reasoner_layers,
        dec_layers=cfg.reasoner_layers, ffn_dim=cfg.reasoner_ffn,
        max_dec_len=cfg.max_dec_len,
    ))
    bridge = training.BridgeLayer(d_model=cfg.d_model, d_cond=cfg.d_cond)
    from .imaginer import AdaptedUNet, DiffusionConfig, DiffusionSchedule, LatentMapper, UNetConfig

    unet = AdaptedUNet(UNetConfig(
        latent_channels=cfg.latent_channels, base_channels=cfg.base_channels,
        d_cond=cfg.d_cond,
    ))
    schedule = DiffusionSchedule(DiffusionConfig(timesteps=cfg.timesteps))
    mapper = LatentMapper(latent_channels=cfg.latent_channels,
                          latent_size=cfg.latent_size, seed=cfg.seed)
    return training.ModelBundle(tokenizer=tokenizer, backbone=backbone,
                                bridge=bridge, unet=unet, schedule=schedule,
                                latent_mapper=mapper)


def _prepare_corpus(cfg: RunConfig, samples, bundle: training.ModelBundle):
    selected = _load_selected(cfg, samples)
    return training.prepare_corpus(
        samples, selected, bundle.tokenizer, bundle.latent_mapper,
        frame_embedder=lambda fr: embed.frame_features(fr, dim=cfg.d_cond, seed=cfg.seed),
        text_embedder=lambda t: embed.text_features(t, dim=cfg.d_cond, seed=cfg.seed),
        placeholder_len=cfg.placeholder_len,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    result = data_mod.build_var_split(
        cfg.dataset_root,
        data_mod.SplitConfig(split=cfg.split, out_dir=_split_dir(cfg)),
    )
    print(f"ingested {len(result.samples)} samples "
          f"({result.skipped_videos} videos skipped) -> {_split_dir(cfg)}")
    return 0


def cmd_gen_hypotheses(cfg: RunConfig, args) -> int:
    samples = _load_samples(cfg)
    client = cfg.client()
    out_dir = _hyp_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        captions = hypgen.caption_events(list(sample.observed_events()), client)
        hset = hypgen.generate_candidates(
            captions, sample.mask_index, client, count=cfg.l_candidates,
            temperature=cfg.temperature, sample_id=sample.sample_id,
        )
        hypgen.save_hypothesis_set(hset, out_dir / f"{sample.sample_id}.json")
    print(f"wrote candidate sets for {len(samples)} samples -> {out_dir}")
    return 0


def cmd_gen_negatives(cfg: RunConfig, args) -> int:
    samples = _load_samples(cfg)
    client = cfg.client()
    out_dir = _neg_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        captions = hypgen.caption_events(list(sample.observed_events()), client)
        hset = hypgen.generate_negatives(
            sample.explanation, captions, client, m=cfg.m_negatives,
            sample_id=sample.sample_id,
        )
        hypgen.save_hypothesis_set(hset, out_dir / f"{sample.sample_id}.json")
    print(f"wrote negative sets for {len(samples)} samples -> {out_dir}")
    return 0


def cmd_train_contrast(cfg: RunConfig, args) -> int:
    samples = _load_samples(cfg)
    neg_dir = _neg_dir(cfg)
    negatives = {}
    for sample in samples:
        path = neg_dir / f"{sample.sample_id}.json"
        if path.exists():
            negatives[sample.sample_id] = hypgen.load_hypothesis_set(path)
    if not negatives:
        raise ValueError(f"no negative sets in {neg_dir}; run gen-negatives first")
    d_img = samples[0].events[0].frame_features.shape[1]
    torch.manual_seed(cfg.seed)
    space = contrast_mod.CausalSpace(
        visual=contrast_mod.VisualEncoder(input_dim=d_img, model_dim=cfg.d_joint),
        text=contrast_mod.TextEncoder(input_dim=cfg.d_txt, model_dim=cfg.d_joint),
        featurizer=_text_featurizer(cfg),
    )
    ccfg = contrast_mod.ContrastConfig(
        temperature=cfg.tau,
        negatives=min(len(h) for h in negatives.values()),
        epochs=cfg.contrast_epochs, lr=cfg.contrast_lr, seed=cfg.seed,
    )
    result = contrast_mod.train_contrast(samples, negatives, ccfg, space)
    best = result.epoch_accuracies[result.best_epoch]
    ck = Path(cfg.run_dir) / "contrast_ckpt"
    contrast_mod.save_contrast_checkpoint(ck, result.space, ccfg,
                                          epoch=result.best_epoch, accuracy=best)
    print(f"contrast training: best epoch {result.best_epoch} "
          f"accuracy {best:.4f} ({result.skipped_samples} samples skipped) -> {ck}")
    return 0


def cmd_select(cfg: RunConfig, args) -> int:
    samples = _load_samples(cfg)
    space, _ = contrast_mod.load_contrast_checkpoint(
        Path(cfg.run_dir) / "contrast_ckpt", featurizer=_text_featurizer(cfg)
    )
    hyp_dir = _hyp_dir(cfg)
    out_dir = _selected_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    unscored = 0
    for sample in samples:
        path = hyp_dir / f"{sample.sample_id}.json"
        if not path.exists():
            continue
        candidates = hypgen.load_hypothesis_set(path)
        partition = data_mod.partition_segments(sample)
        if len(partition.final) == 0:
            # no anchor segment to score against; pass the first k through
            chosen = HypothesisSet(
                hypotheses=candidates.hypotheses[:cfg.k],
                source_sample_id=candidates.source_sample_id,
                flags=tuple(candidates.flags) + (FLAG_UNSCORED,),
            )
            unscored += 1
        else:
            chosen = contrast_mod.select_topk(candidates, partition, space, cfg.k)
        hypgen.save_hypothesis_set(chosen, out_dir / f"{sample.sample_id}.json")
    print(f"selected top-{cfg.k} for {len(samples)} samples "
          f"({unscored} unscored) -> {out_dir}")
    return 0


def cmd_train_stage1(cfg: RunConfig, args) -> int:
    samples = _load_samples(cfg)
    texts = [s.explanation for s in samples]
    for s in samples:
        texts.extend(e.caption or "" for e in s.events)
    tokenizer = reasoner.ByteTokenizer.train(texts, num_merges=64)
    bundle = _build_bundle(cfg, tokenizer)
    corpus = _prepare_corpus(cfg, samples, bundle)
    run_dir = training.RunDirectory(Path(cfg.run_dir) / "stage1")
    run_dir.snapshot_config(dataclasses.asdict(cfg))
    plan_r = training.TrainPlan(stage=training.STAGE_REASONER, epochs=cfg.stage1_epochs,
                                lr=cfg.stage1_lr, seed=cfg.seed,
                                m_frames=cfg.m_frames, snr_gamma=cfg.snr_gamma)
    hist_r = training.run_stage1(plan_r, corpus, bundle, run_dir=run_dir)
    plan_i = dataclasses.replace(plan_r, stage=training.STAGE_IMAGINER)
    hist_i = training.run_stage1(plan_i, corpus, bundle, run_dir=run_dir)
    ck = Path(cfg.run_dir) / "stage1_ckpt"
    training.save_bundle(ck, bundle, {"stage": "I"})
    print(f"stage1 done: reasoner ce {hist_r.losses[-1]:.4f}, "
          f"imaginer diff {hist_i.losses[-1]:.4f} -> {ck}")
    return 0


def cmd_train_stage2(cfg: RunConfig, args) -> int:
    ck_in = Path(cfg.run_dir) / "stage1_ckpt"
    if not ck_in.exists():
        raise FileNotFoundError(f"missing stage1 checkpoint: {ck_in}")
    bundle, _ = training.load_bundle(ck_in)
    samples = _load_samples(cfg)
    corpus = _prepare_corpus(cfg, samples, bundle)
    run_dir = training.RunDirectory(Path(cfg.run_dir) / "stage2")
    run_dir.snapshot_config(dataclasses.asdict(cfg))
    plan = training.TrainPlan(stage=training.STAGE_JOINT, epochs=cfg.stage2_epochs,
                              alpha=cfg.alpha, lr=cfg.stage2_lr, seed=cfg.seed,
                              m_frames=cfg.m_frames, snr_gamma=cfg.snr_gamma)
    history = training.run_stage2(plan, corpus, bundle, run_dir=run_dir)
    ck = Path(cfg.run_dir) / "stage2_ckpt"
    training.save_bundle(ck, bundle, {"stage": "II"})
    print(f"stage2 done: joint {history.losses[-1]:.4f} -> {ck}")
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    ck = Path(cfg.run_dir) / "stage2_ckpt"
    if not ck.exists():
        ck = Path(cfg.run_dir) / "stage1_ckpt"
    if not ck.exists():
        raise FileNotFoundError(f"no trained checkpoint under {cfg.run_dir}")
    bundle, _ = training.load_bundle(ck)
    sample = data_mod.load_sample(args.sample)
    sel_path = _selected_dir(cfg) / f"{sample.sample_id}.json"
    if sel_path.exists():
        topk = hypgen.load_hypothesis_set(sel_path)
    else:
        topk = HypothesisSet(hypotheses=(), source_sample_id=sample.sample_id)
    inp = reasoner.assemble_input(sample, topk, bundle.tokenizer, query=cfg.query,
                                  placeholder_len=cfg.placeholder_len, seed=cfg.seed)
    out = reasoner.reason(inp, bundle.backbone, bundle.tokenizer, mode="greedy")
    print(out.text)
    out_dir = Path(cfg.run_dir) / "infer"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / sample.sample_id
    stem.with_suffix(".txt").write_text(
        f"sample_id: {sample.sample_id}\n"
        f"text: {out.text}\n"
        f"tokens: {' '.join(str(t) for t in out.tokens)}\n"
        f"truncated: {out.truncated}\n",
        encoding="utf-8",
    )
    data_mod.write_tensor(stem.with_suffix(".ct.avrf"), out.c_t.detach().numpy())
    return 0


def _read_eval_file(path: str | Path) -> dict[str, list[str]]:
    table: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'sample_id<TAB>text'")
        sid, text = line.split("\t", 1)
        table.setdefault(sid, []).append(text)
    return table


def cmd_evaluate(cfg: RunConfig, args) -> int:
    preds = _read_eval_file(args.pred)
    refs = _read_eval_file(args.ref)
    pairs = []
    for sid, cand_list in sorted(preds.items()):
        if sid not in refs:
            raise ValueError(f"prediction {sid!r} has no reference")
        pairs.append(metrics.EvalPair(candidate=cand_list[0],
                                      references=tuple(refs[sid]), sample_id=sid))
    report = metrics.evaluate(pairs)
    print(report.render_text())
    if args.out:
        report.write_kv(args.out)
    return 0


def cmd_dry_run(cfg: RunConfig) -> int:
    problems = []
    if cfg.dataset_root and not Path(cfg.dataset_root).exists():
        problems.append(f"dataset_root does not exist: {cfg.dataset_root}")
    if cfg.mock_llm and not Path(cfg.mock_llm).exists():
        problems.append(f"mock fixture does not exist: {cfg.mock_llm}")
    if not cfg.mock_llm and not cfg.endpoint:
        problems.append("no endpoint and no mock fixture configured")
    if problems:
        for p in problems:
            print(f"dry-run: {p}", file=sys.stderr)
        return 1
    print("dry-run: config ok")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "ingest": cmd_ingest,
    "gen-hypotheses": cmd_gen_hypotheses,
    "gen-negatives": cmd_gen_negatives,
    "train-contrast": cmd_train_contrast,
    "select": cmd_select,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abduct",
                                     description="Visual abductive reasoning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "evaluate",
                       help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--run-dir", dest="run_dir", default=None)
        p.add_argument("--mock-llm", dest="mock_llm", default=None,
                       help="fixture path for offline LLM replay")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--dry-run", action="store_true")
        if name == "infer":
            p.add_argument("--sample", required=True, help="sample document path")
        if name == "evaluate":
            p.add_argument("--pred", required=True, help="sample_id<TAB>text per line")
            p.add_argument("--ref", required=True, help="sample_id<TAB>text per line")
            p.add_argument("--out", default=None, help="write key-value report here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            cfg = RunConfig.load(args.config)
        else:
            cfg = RunConfig()
        cfg = cfg.apply_overrides(args)
        if args.dry_run:
            return cmd_dry_run(cfg)
        np.random.seed(cfg.seed)
        torch.manual_seed(cfg.seed)
        return _COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - single-line CLI diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
