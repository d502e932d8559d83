"""Command-line entry point.

Subcommands: train, eval, gradcheck, inspect-topology, export-attention.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure
(non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from . import data as D
from . import gradcheck as G
from . import optim as O
from . import plots
from .config import RunConfig, load_config, serialize_config
from .errors import ConfigError, DataError, NumericError
from .model import (
    HEAD_MSE,
    HEAD_SOFTMAX,
    Model,
    load_checkpoint,
    matched_hidden_size,
    perplexity,
    save_checkpoint,
)
from .topology import Topology, dump as topology_dump, layer_shortest_path, path_bound

CORPUS_SEED = 20080  # built-in corpus is fixed across run seeds on purpose


class _Parser(argparse.ArgumentParser):
    # argparse exits(2) on usage problems; remap onto our exit-code contract
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcrnn", description="Multi-channel RNN trainer and analysis tools")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="path to a key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--workers", type=int, default=1, help="channel-parallel threads")

    sp = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    common(sp)
    sp.add_argument("--baseline", action="store_true",
                    help="run the identical pipeline as a conventional n=2 model "
                         "(identity mixing, frozen) sized to match parameters")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=["train", "valid", "test"], default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences")
    common(sp)
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.add_argument("--samples", type=int, default=4)
    sp.add_argument("--mutate", choices=["mix-transpose"], help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("inspect-topology", help="dump in-degrees, blocks and path-length bounds")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--out", help="also write topology.txt and topology.png here")
    sp.set_defaults(func=cmd_inspect_topology)

    sp = sub.add_parser("export-attention", help="per-step channel weights for a text")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--out", help="also write attention.csv and heatmaps here")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_export_attention)
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    cfg.validate()
    return cfg


# -- data assembly -----------------------------------------------------------


def _lm_corpus(cfg: RunConfig):
    if cfg.train_path:
        train = D.load_text(cfg.train_path)
        if cfg.valid_path and cfg.test_path:
            valid, test = D.load_text(cfg.valid_path), D.load_text(cfg.test_path)
        else:
            train, valid, test = D.split_corpus(train)
    else:
        train, valid, test = D.split_corpus(D.synth_corpus(cfg.corpus_bytes, CORPUS_SEED))
    vocab = D.build_vocab(train, cfg.level, cfg.min_count)
    ids = {
        "train": vocab.encode(D.tokenize(train, cfg.level)),
        "valid": vocab.encode(D.tokenize(valid, cfg.level)),
        "test": vocab.encode(D.tokenize(test, cfg.level)),
    }
    return vocab, ids


def _synthetic_spec(cfg: RunConfig) -> D.SyntheticSpec:
    return D.SyntheticSpec(task=cfg.task, length=cfg.length, alphabet=cfg.alphabet,
                           blank=cfg.blank if cfg.task == "copy" else 0, seed=cfg.seed)


def _build_model(cfg: RunConfig, vocab_size: int | None, identity_mix=False, freeze_mix=False) -> Model:
    head = HEAD_MSE if cfg.task == "adding" else HEAD_SOFTMAX
    return Model.create(
        head=head,
        n=cfg.n,
        cell_kind=cfg.cell,
        n_layers=cfg.layers,
        n_h=cfg.n_h,
        n_e=cfg.n_e if head == HEAD_SOFTMAX else None,
        vocab_size=vocab_size if head == HEAD_SOFTMAX else None,
        seed=cfg.seed,
        tie_weights=cfg.tie if head == HEAD_SOFTMAX else False,
        dropout_p=cfg.dropout,
        in_dim=2 if head == HEAD_MSE else None,
        identity_mix=identity_mix,
        mix_cell_state=cfg.mix_cell_state,
        freeze_mix=freeze_mix,
    )


def baseline_config(cfg: RunConfig, vocab_size: int | None) -> RunConfig:
    """Conventional-model control: n=2 with identity mixing frozen, hidden
    size grown until the trainable-parameter count at least matches the
    multi-channel model described by cfg."""
    target = _build_model(cfg, vocab_size).trainable_param_count()

    def count(n_h: int) -> int:
        trial = _clone(cfg, n=2, n_h=n_h, n_e=n_h if cfg.tie else cfg.n_e)
        return _build_model(trial, vocab_size, identity_mix=True, freeze_mix=True).trainable_param_count()

    n_h = matched_hidden_size(count, target, lo=cfg.n_h, hi=8 * cfg.n_h + 64)
    return _clone(cfg, n=2, n_h=n_h, n_e=n_h if cfg.tie else cfg.n_e)


def _clone(cfg: RunConfig, **changes) -> RunConfig:
    import dataclasses

    return dataclasses.replace(cfg, **changes)


def _capped(stream, cap: int):
    return itertools.islice(stream, cap) if cap > 0 else stream


VAL_SEED = 900913  # synthetic validation batches are shared across run seeds


def _train_streams(cfg: RunConfig, ids, spec):
    if cfg.task == "lm":
        def train_stream(epoch: int):
            return _capped(D.batch_stream(ids["train"], cfg.batch_size, cfg.window),
                           cfg.max_windows_per_epoch)

        def valid_stream():
            return D.batch_stream(ids["valid"], cfg.batch_size, cfg.window)

        return train_stream, valid_stream, True

    make = D.copy_batch if cfg.task == "copy" else D.adding_batch

    def train_stream(epoch: int):
        return (make(spec, cfg.batch_size, seed=(cfg.seed, epoch, i))
                for i in range(cfg.steps_per_epoch))

    def valid_stream():
        return (make(spec, cfg.batch_size, seed=(VAL_SEED, i)) for i in range(cfg.val_batches))

    return train_stream, valid_stream, False


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    vocab = None
    ids = spec = None
    if cfg.task == "lm":
        vocab, ids = _lm_corpus(cfg)
        vocab_size = len(vocab)
    else:
        spec = _synthetic_spec(cfg)
        vocab_size = spec.vocab_size if cfg.task == "copy" else None

    if args.baseline:
        cfg = baseline_config(cfg, vocab_size)
        model = _build_model(cfg, vocab_size, identity_mix=True, freeze_mix=True)
    else:
        model = _build_model(cfg, vocab_size)

    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.txt"), "w") as f:
        f.write(serialize_config(cfg))
    if vocab is not None:
        vocab.save(os.path.join(cfg.out, "vocab.txt"))

    train_stream, valid_stream, carry_over = _train_streams(cfg, ids, spec)
    ocfg = O.OptimConfig(lr=cfg.lr, clip=cfg.clip, window=cfg.window, batch_size=cfg.batch_size,
                         patience=cfg.patience, halvings=cfg.halvings, max_epochs=cfg.max_epochs,
                         seed=cfg.seed, momentum=cfg.momentum)
    log = O.MetricsLog(os.path.join(cfg.out, "metrics.csv"), os.path.join(cfg.out, "timing.csv"))
    ckpt = os.path.join(cfg.out, "model.ckpt")
    # the embedded config drops the output path so identical runs produce
    # byte-identical checkpoints regardless of where they were written
    extra = {"config_text": serialize_config(_clone(cfg, out="run")), "level": cfg.level,
             "vocab": vocab.tokens if vocab is not None else None, "task": cfg.task}
    state = O.fit(model, train_stream, valid_stream, ocfg, log=log, checkpoint_path=ckpt,
                  checkpoint_meta=extra, workers=args.workers, carry_over=carry_over)

    rows = [dict(zip(("epoch", "step", "lr", "train_loss", "val_loss", "val_ppl"),
                     (int(a), int(b), float(c), float(d), float(e), float(f))))
            for a, b, c, d, e, f in (r.split(",") for r in log.rows)]
    plots.training_curves(rows, os.path.join(cfg.out, "curves.png"))
    print(f"trained {state.epoch} epochs, {state.step} steps; "
          f"best val loss {state.best_val:.6f} (ppl {perplexity(state.best_val):.4f})")
    print(f"outputs in {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    from .config import parse_config

    cfg = parse_config(meta["config_text"]) if meta.get("config_text") else RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    cfg.validate()
    if cfg.task == "lm":
        vocab, ids = _lm_corpus(cfg)
        stream = D.batch_stream(ids[args.split], cfg.batch_size, cfg.window)
        loss = O.evaluate(model, stream, workers=args.workers)
    else:
        spec = _synthetic_spec(cfg)
        make = D.copy_batch if cfg.task == "copy" else D.adding_batch
        stream = (make(spec, cfg.batch_size, seed=(VAL_SEED, i)) for i in range(cfg.val_batches))
        loss = O.evaluate(model, stream, workers=args.workers, carry_over=False)
    if cfg.task == "adding":
        print(f"split={args.split} mse={loss:.12g}")
    else:
        print(f"split={args.split} loss={loss:.12g} ppl={perplexity(loss):.12g}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    # the certificate covers code paths (n, cell, layers, task head), not
    # tensor sizes; a reduced instance keeps finite differences sharp
    t = max(7, cfg.n + 3)
    small = _clone(cfg, n_h=min(cfg.n_h, 8),
                   n_e=min(cfg.n_h, 8) if cfg.tie else min(cfg.n_e, 8),
                   window=max(cfg.n, 7), batch_size=2)
    if cfg.task == "lm":
        vocab_size = 11
        model = _build_model(small, vocab_size)
        from .model import Batch

        ids = rng.integers(0, vocab_size, size=(2, t + 1))
        batch = Batch(inputs=ids[:, :-1], targets=ids[:, 1:], mask=None)
    elif cfg.task == "copy":
        spec = D.SyntheticSpec(task="copy", length=14, alphabet=cfg.alphabet,
                               blank=6, seed=cfg.seed)
        model = _build_model(small, spec.vocab_size)
        batch = D.copy_batch(spec, 2, seed=cfg.seed)
    else:
        spec = D.SyntheticSpec(task="adding", length=t, seed=cfg.seed)
        model = _build_model(small, None)
        batch = D.adding_batch(spec, 2, seed=cfg.seed)
    G.randomize_params(model, cfg.seed)

    if args.mutate:
        def loss_fn():
            return model.forward_loss(batch, mode="eval", workers=args.workers)[0]

        _, tape = model.forward_loss(batch, mode="eval", workers=args.workers)
        analytic = model.backward(tape, workers=args.workers)
        name = sorted(k for k in analytic if ".mix." in k)[-1]
        analytic[name] = analytic[name].T.copy()  # off-by-transpose bug, on purpose
        params = {n: a for n, a, _ in model.named_params()}
        report = G.check_gradients(loss_fn, params, analytic, args.threshold, args.samples, seed=cfg.seed)
    else:
        report = G.check_model(model, batch, args.threshold, args.samples, seed=cfg.seed, workers=args.workers)

    print(G.render_report(report))
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w") as f:
            f.write(G.report_to_csv(report))
    return 0 if report.ok else 3


def cmd_inspect_topology(args) -> int:
    if args.n < 2:
        raise ConfigError(f"n must be >= 2, got {args.n}")
    topo = Topology(args.n)
    text = topology_dump(topo, args.steps)
    lines = [text, "", "path-length bound check (worst over starts 1..%d):" % args.steps,
             "l,measured,bound,ok"]
    for l in range(1, 13):
        worst = max(layer_shortest_path(topo, i, l) for i in range(1, args.steps + 1))
        bound = path_bound(topo, l)
        lines.append(f"{l},{worst},{bound},{'yes' if worst <= bound else 'NO'}")
    out = "\n".join(lines)
    print(out)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "topology.txt"), "w") as f:
            f.write(out + "\n")
        plots.topology_figure(topo, max(args.steps, 12), os.path.join(args.out, "topology.png"))
    return 0


def cmd_export_attention(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    if meta.get("task") == "adding" or model.head == HEAD_MSE:
        raise ConfigError("attention export needs a token model checkpoint")
    tokens_list = meta.get("vocab")
    if not tokens_list:
        raise DataError("checkpoint carries no vocabulary")
    vocab = D.Vocab(tokens_list)
    level = meta.get("level", "char")
    toks = D.tokenize(args.text, level)
    if not toks:
        raise DataError("empty input text")
    enc = vocab.encode(toks)
    unk_share = float(np.mean(enc == D.UNK))
    if unk_share > 0.25:
        print(f"warning: {unk_share:.0%} of tokens are out of vocabulary", file=sys.stderr)

    from .model import Batch

    batch = Batch(inputs=enc[None, :], targets=np.zeros((1, len(enc)), dtype=np.int64),
                  mask=np.zeros((1, len(enc))))
    # mask of zeros would break the loss denominator; score every position
    batch.mask = None
    _, tape = model.forward_loss(batch, mode="eval", workers=args.workers)

    k = model.layers[0].topo.n - 1
    rows = ["layer,step,token,channel,alpha"]
    heat = []
    for li, lt in enumerate(tape.layer_tapes):
        alphas = np.stack([a[0] for a in lt.alpha])  # (T, K); all-ones column when K == 1
        heat.append(alphas)
        for t in range(len(toks)):
            for c in range(alphas.shape[1]):
                tok = toks[t].encode("unicode_escape").decode("ascii")
                # 17 significant digits round-trip doubles exactly, so the
                # parsed table keeps the in-memory simplex guarantees
                rows.append(f"{li},{t + 1},{tok},{c + 1},{alphas[t, c]:.17g}")
    table = "\n".join(rows)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "attention.csv"), "w") as f:
            f.write(table + "\n")
        for li, alphas in enumerate(heat):
            plots.attention_heatmap(alphas, toks, os.path.join(args.out, f"attention_layer{li}.png"), layer=li)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        # bad argument values surfaced by lower modules
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
