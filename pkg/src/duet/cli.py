"""Command-line entry points: fixture generation, backbone pretraining,
training, index building, querying, evaluation, and serving."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image


def _cmd_fixture(args):
    from .fixtures import make_fixture_dataset

    paths = make_fixture_dataset(args.out, seed=args.seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))


def _cmd_pretrain(args):
    from .fixtures import pretrain_backbone

    summary = pretrain_backbone(args.out, steps=args.steps, seed=args.seed)
    print(json.dumps(summary, indent=2))


def _cmd_train(args):
    from .data import load_manifest
    from .training import TrainConfig, Trainer

    config = TrainConfig.from_yaml(args.config, overrides=args.override)
    manifest = load_manifest(args.manifest)
    trainer = Trainer(config)
    path = trainer.fit(manifest)
    print(f"checkpoint: {path}")


def _cmd_index(args):
    from .data import load_manifest
    from .index import build_index
    from .training import load_inference_model

    manifest = load_manifest(args.manifest)
    adapter, _, meta = load_inference_model(args.checkpoint)
    index = build_index(manifest, adapter, meta["fingerprint"])
    index.save(args.out)
    print(f"indexed {len(index)} photos -> {args.out}")


def _cmd_query(args):
    from .index import GalleryIndex, query_index
    from .training import load_inference_model

    adapter, composer, meta = load_inference_model(args.checkpoint)
    index = GalleryIndex.load(args.index)
    with Image.open(args.sketch) as sketch:
        vec = composer.build_inference_query(sketch, text=args.text,
                                             connector=args.connector)
    result = query_index(index, vec, args.k,
                         expected_fingerprint=meta["fingerprint"])
    for pid, score in zip(result.ids, result.scores):
        print(f"{score:.4f}\t{pid}")


def _cmd_eval(args):
    from .data import load_manifest
    from .evaluation import evaluate
    from .training import load_inference_model

    manifest = load_manifest(args.manifest)
    adapter, composer, meta = load_inference_model(args.checkpoint)
    report = evaluate(args.protocol, manifest, adapter, composer,
                      fingerprint=meta["fingerprint"],
                      object_lists=args.object_lists)
    out = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
        print(f"report -> {args.out}")
        print(json.dumps(report["metrics"], indent=2))
    else:
        print(out)


def _cmd_serve(args):
    from .service import ServiceConfig, run_service

    run_service(ServiceConfig(
        checkpoint_path=args.checkpoint, index_dir=args.index,
        gallery_root=args.gallery_root, host=args.host, port=args.port,
    ))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="[%(asctime)s %(levelname)s %(name)s] %(message)s")
    parser = argparse.ArgumentParser(prog="duet",
                                     description="sketch+text composed retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate the synthetic fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_fixture)

    p = sub.add_parser("pretrain", help="contrastively pretrain the mini backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("train", help="train from a YAML config and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--override", action="append", default=[],
                   metavar="K=V", help="dotted config override, repeatable")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("index", help="precompute gallery features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_index)

    p = sub.add_parser("query", help="rank a sketch(+text) against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sketch", required=True)
    p.add_argument("--text", default=None)
    p.add_argument("--connector", default=None)
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(fn=_cmd_query)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--protocol", required=True,
                   choices=["fine_grained", "scene", "domain_transfer"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--object-lists", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("serve", help="run the retrieval HTTP service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--gallery-root", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
