"""Command-line entry points.

Subcommands cover the whole workflow: synth / ingest produce a dataset
bundle, train fits a model and writes a checkpoint, recommend / hints /
evaluate / ablate consume the two.  Every command echoes its resolved
configuration into the output directory, writes delimited outputs, and
renders figures next to them.

Exit codes: 0 on success, 2 for input problems, 3 for runtime failures.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import report
from .bundle import Bundle, PipelineConfig, build_bundle, load_bundle, save_bundle
from .dataset import (
    SynthConfig,
    generate_synthetic,
    ingest,
    write_events_csv,
    write_user_profiles,
)
from .errors import (
    DataError,
    LevelRecError,
    UnknownUser,
    VersionMismatch,
)
from .evaluation import (
    ablation,
    aggregate_tables,
    evaluate_model,
)
from .hints import (
    interaction_aspect,
    interaction_heatmap,
    poi_aspect,
    poi_aspect_heatmap,
    user_aspect,
    user_aspect_heatmap,
    write_heatmap_csv,
)
from .kvconfig import config_from_mapping, format_config, parse_kv_file
from .model import Scorer, load_checkpoint, save_checkpoint
from .poi_tree import build_tree, load_poi_profiles, save_poi_profiles
from .training import TrainConfig, make_env, train, write_history_csv


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """One flat knob set shared by every subcommand.

    Values come from built-in defaults, then an optional ``--config`` file,
    then ``--set key=value`` overrides, then ``--seed``.
    """

    # synthetic data
    m: int = 200
    levels: tuple[int, ...] = (10, 50, 200)
    latent_dim: int = 8
    noise_rate: float = 0.1
    events_per_user: int = 60
    span_days: float = 90.0
    search_rate: float = 0.6
    hier_mix: float = 0.75
    temperature: float = 0.8
    geo_neighbors: int = 8
    n_poi_tags: int = 24
    n_user_numeric: int = 2
    n_user_flags: int = 4
    # preparation pipeline
    min_user_checkins: int = 10
    min_poi_visitors: int = 10
    train_window_days: float = 60.0
    test_window_days: float = 15.0
    cosearch_window_s: int = 1800
    covisit_window_s: int = 1800
    user_quantiles: tuple[float, ...] = (0.5,)
    user_min_support: int = 1
    poi_min_support: int = 10
    # model and training
    lambda1: float = 0.01
    lambda2: float = 0.1
    lambda_theta: float = 1.0
    gamma: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 50
    batch_size: int = 256
    r: int = 50
    r_impl: int = 150
    t_history: int = 3
    use_attention: bool = True
    init_scale: float = 0.01
    k_select: int = 10
    # evaluation / recommendation / hints
    eval_ks: tuple[int, ...] = (5, 10, 20)
    top_k: int = 10
    hint_features: int = 5
    eta_threshold: float = 0.5
    seed: int = 0

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            m=self.m, levels=self.levels, latent_dim=self.latent_dim,
            noise_rate=self.noise_rate, events_per_user=self.events_per_user,
            span_days=self.span_days, search_rate=self.search_rate,
            hier_mix=self.hier_mix, temperature=self.temperature,
            geo_neighbors=self.geo_neighbors, n_poi_tags=self.n_poi_tags,
            n_user_numeric=self.n_user_numeric, n_user_flags=self.n_user_flags,
        )

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            min_user_checkins=self.min_user_checkins,
            min_poi_visitors=self.min_poi_visitors,
            train_window_days=self.train_window_days,
            test_window_days=self.test_window_days,
            cosearch_window_s=self.cosearch_window_s,
            covisit_window_s=self.covisit_window_s,
            t_history=self.t_history,
            user_quantiles=self.user_quantiles,
            user_min_support=self.user_min_support,
            poi_min_support=self.poi_min_support,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda1=self.lambda1, lambda2=self.lambda2,
            lambda_theta=self.lambda_theta, gamma=self.gamma,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, r=self.r,
            r_impl=self.r_impl, t_history=self.t_history,
            use_attention=self.use_attention, init_scale=self.init_scale,
            k_select=self.k_select,
        )


def resolve_config(args) -> RunConfig:
    mapping: dict[str, str] = {}
    if getattr(args, "config", None):
        mapping.update(parse_kv_file(args.config))
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise DataError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        mapping[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = str(args.seed)
    return config_from_mapping(RunConfig, mapping)


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(format_config(cfg), encoding="utf-8")
    return out


def _load_model(args, bundle: Bundle, cfg: RunConfig):
    params = load_checkpoint(args.checkpoint)
    dims = params.dims
    if dims.m != len(bundle.split.users) or dims.n != bundle.index.n:
        raise VersionMismatch(
            f"checkpoint shape ({dims.m} users, levels {dims.n}) does not "
            f"match the bundle ({len(bundle.split.users)} users, "
            f"levels {bundle.index.n})")
    scorer = Scorer(params, bundle.index, graphs=bundle.graphs,
                    history=bundle.history, gamma=cfg.gamma)
    return params, scorer


def _user_row(bundle: Bundle, user_id: str) -> int:
    row = bundle.user_row.get(user_id)
    if row is None:
        raise UnknownUser(f"user {user_id!r} is not in the bundle")
    return row


def _train_rows(bundle: Bundle, level: int, u: int) -> set[int]:
    rows = set()
    row_of = {pid: i for i, pid in enumerate(bundle.index.level_ids[level - 1])}
    uid = bundle.split.users[u]
    for ev in bundle.split.train.get(level, []):
        if ev.user_id == uid:
            rows.add(row_of[ev.poi_id])
    return rows


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    data = generate_synthetic(cfg.synth_config(), cfg.seed)
    raw = out / "raw"
    raw.mkdir(exist_ok=True)
    write_events_csv(data.checkins, raw / "checkins.csv")
    write_events_csv(data.searches, raw / "searches.csv")
    write_user_profiles(data.user_profiles, raw / "users.jsonl")
    save_poi_profiles(data.tree, raw / "pois.jsonl")
    bundle = build_bundle(data.tree, data.checkins, data.searches,
                          data.user_profiles, cfg.pipeline_config())
    save_bundle(bundle, out / "bundle")
    counts = bundle.meta["counts"]
    print(f"generated {len(data.checkins)} check-ins, {len(data.searches)} searches, "
          f"{len(data.user_profiles)} users over levels {bundle.index.n}")
    print(f"bundle written to {out / 'bundle'} "
          f"(train events per level: {counts['train']})")
    return 0


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    tree = build_tree(load_poi_profiles(args.pois))
    result = ingest(args.checkins, args.searches, args.users, tree=tree)
    bundle = build_bundle(tree, result.checkins, result.searches,
                          result.user_profiles, cfg.pipeline_config())
    save_bundle(bundle, out / "bundle")
    skipped = {k: v for k, v in result.skipped.items() if v}
    print(f"ingested {len(result.checkins)} check-ins, "
          f"{len(result.searches)} searches"
          + (f" (skipped {skipped})" if skipped else ""))
    print(f"bundle written to {out / 'bundle'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    bundle = load_bundle(args.bundle)
    env = make_env(bundle.index, bundle.features, bundle.split,
                   bundle.graphs, bundle.history)
    result = train(env, cfg.train_config())
    save_checkpoint(result.params, out / "checkpoint.bin")
    write_history_csv(result.history, out / "history.csv")
    if result.history:
        report.save_history_figure(result.history, out / "history.png")
    last = result.history[-1] if result.history else None
    print(f"trained {cfg.epochs} epochs; best validation epoch {result.best_epoch}")
    if last is not None:
        print(f"final loss {last.total_loss:.6g} "
              f"(attribute {last.l_a:.6g}, pairwise {last.l_i:.6g})")
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def cmd_recommend(args) -> int:
    cfg = resolve_config(args)
    bundle = load_bundle(args.bundle)
    _, scorer = _load_model(args, bundle, cfg)
    u = _user_row(bundle, args.user)
    exclude = () if args.keep_seen else _train_rows(bundle, args.level, u)
    recs = scorer.recommend_topk(u, args.level, cfg.top_k, exclude=exclude)
    lines = ["rank,poi_id,score"]
    lines += [f"{i + 1},{pid},{score:.12g}" for i, (pid, score) in enumerate(recs)]
    print("\n".join(lines))
    if args.out:
        out = _prepare_out(args, cfg)
        (out / "recommendations.csv").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")
    return 0


def cmd_hints(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    bundle = load_bundle(args.bundle)
    params, scorer = _load_model(args, bundle, cfg)
    u = _user_row(bundle, args.user)
    level, prow = bundle.index.row_of(args.poi)
    labels = bundle.features.feature_labels()

    ua = user_aspect(params, u, prow, level, k=cfg.hint_features)
    payload = {
        "user_id": args.user,
        "poi_id": args.poi,
        "level": level,
        "user_aspect": {
            "feature_columns": list(ua.feature_columns),
            "feature_labels": [labels[c] for c in ua.feature_columns],
            "feature_values": list(ua.feature_values),
            "best_column": ua.best_column,
            "best_label": labels[ua.best_column],
            "best_value": ua.best_value,
        },
    }

    if params.dims.use_attention and level < bundle.index.depth \
            and len(bundle.index.child_rows[level - 1][prow]) > 0:
        pa = poi_aspect(params, bundle.index, u, prow, level)
        payload["poi_aspect"] = {
            "children": list(pa.child_ids),
            "ratios": list(pa.ratios),
            "softmax_ratios": list(pa.softmax_ratios),
            "hot_child": pa.hot_child,
            "degenerate": pa.degenerate,
            "has_negative": pa.has_negative,
        }
    else:
        payload["poi_aspect"] = None

    historical = scorer.gamma * scorer.historical_score(u, prow, level)
    total = scorer.total_score(u, prow, level)
    ia = interaction_aspect(historical, total, threshold=cfg.eta_threshold)
    payload["interaction_aspect"] = {
        "historical": historical,
        "total": total,
        "eta": ia.eta,
        "threshold": cfg.eta_threshold,
        "flagged": ia.flagged,
    }

    with (out / "hints.json").open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    exclude = _train_rows(bundle, level, u)
    recs = scorer.recommend_topk(u, level, min(5, bundle.index.n[level - 1]),
                                 exclude=exclude)
    if not recs:
        # the user has seen the whole level; show the seen POIs instead
        exclude = set()
        recs = scorer.recommend_topk(u, level, min(5, bundle.index.n[level - 1]))
    rec_rows = [bundle.index.row_of(pid)[1] for pid, _ in recs]
    hm_user = user_aspect_heatmap(params, bundle.index, u, level, rec_rows,
                                  k_features=cfg.hint_features)
    hm_user.col_labels = [labels[int(c[1:])] for c in hm_user.col_labels]
    write_heatmap_csv(hm_user, out / "hint_user_aspect.csv")
    report.save_heatmap_figure(hm_user, "feature match of top recommendations",
                               out / "hint_user_aspect.png")
    if params.dims.use_attention and level < bundle.index.depth:
        hm_poi = poi_aspect_heatmap(params, bundle.index, u, level, rec_rows)
        write_heatmap_csv(hm_poi, out / "hint_poi_aspect.csv")
        report.save_heatmap_figure(hm_poi, "child contribution ratios",
                                   out / "hint_poi_aspect.png")
    hm_geo = interaction_heatmap(scorer, [u], level, k=len(rec_rows),
                                 exclude_per_user=[exclude],
                                 threshold=cfg.eta_threshold)
    write_heatmap_csv(hm_geo, out / "hint_interaction.csv")
    report.save_heatmap_figure(hm_geo, "geospatial score share",
                               out / "hint_interaction.png")

    flag = " [geospatial]" if ia.flagged else ""
    print(f"hints for user {args.user} on {args.poi} (level {level}) "
          f"written to {out}")
    print(f"eta = {ia.eta:.4f}{flag}; "
          f"strongest feature: {labels[ua.best_column]}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    bundle = load_bundle(args.bundle)
    params, _ = _load_model(args, bundle, cfg)
    env = make_env(bundle.index, bundle.features, bundle.split,
                   bundle.graphs, bundle.history)
    table = evaluate_model(params, env, bundle.split.test, ks=cfg.eval_ks,
                           gamma=cfg.gamma)
    table.to_csv(out / "metrics.csv")
    report.save_metric_figure(table, out / "metrics.png")
    print("level,k,precision,ndcg,n_users,n_cold")
    for row in table.rows:
        print(f"{row.level},{row.k},{row.precision:.6g},{row.ndcg:.6g},"
              f"{row.n_users},{row.n_cold}")
    print(f"metrics written to {out / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    bundle = load_bundle(args.bundle)
    env = make_env(bundle.index, bundle.features, bundle.split,
                   bundle.graphs, bundle.history)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise DataError("--seeds must name at least one seed")
    tables: dict[str, list] = {}
    for seed in seeds:
        scfg = dataclasses.replace(cfg.train_config(), seed=seed)
        results = ablation(env, bundle.split.test, scfg, ks=cfg.eval_ks)
        for name, (_, table) in results.items():
            tables.setdefault(name, []).append(table)
        print(f"seed {seed} done")
    summary = {name: aggregate_tables(ts) for name, ts in tables.items()}
    lines = ["variant,level,k,precision_mean,precision_std,ndcg_mean,ndcg_std,n_seeds"]
    for name in sorted(summary):
        for row in summary[name]:
            lines.append(
                f"{name},{row['level']},{row['k']},"
                f"{row['precision_mean']:.12g},{row['precision_std']:.12g},"
                f"{row['ndcg_mean']:.12g},{row['ndcg_std']:.12g},{row['n_seeds']}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    k_fig = 10 if 10 in cfg.eval_ks else cfg.eval_ks[0]
    report.save_ablation_figure(summary, k_fig, out / "ablation.png")
    for line in lines:
        print(line)
    print(f"ablation written to {out / 'ablation.csv'}")
    return 0


# --- argument plumbing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="levelrec",
        description="multi-level POI recommendation: data prep, training, "
                    "recommendation, hints, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", required=out_required,
                       help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset and bundle")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a bundle from raw logs")
    common(p)
    p.add_argument("--checkins", required=True)
    p.add_argument("--searches", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--pois", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit the model on a bundle")
    common(p)
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="top-k POIs for one user and level")
    common(p, out_required=False)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--keep-seen", action="store_true",
                   help="do not exclude the user's training POIs")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("hints", help="explain one user/POI recommendation")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--poi", required=True)
    p.set_defaults(func=cmd_hints)

    p = sub.add_parser("evaluate", help="test-split metrics for a checkpoint")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare model variants over seeds")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated training seeds")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LevelRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
