#!/usr/bin/env python3
"""
cellcompare - Main Entry Point
Dengesiz hücre tespiti: sentetik veri -> eğitim (RoI + sınıf karşılaştırma) -> değerlendirme -> tarama
"""

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from loguru import logger

LOG_LEVEL_ENV = "CELLCOMPARE_LOG_LEVEL"
STDERR_FORMAT = ("<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
                 "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>")
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


def configure_logging(config_level: str = "INFO", log_file: str = "logs/cellcompare.log",
                      rotation: str = "10 MB", verbose: bool = False) -> str:
    """Stderr sink at env/config level, DEBUG file sink; returns the stderr level"""
    level = "DEBUG" if verbose else os.getenv(LOG_LEVEL_ENV, config_level).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format=STDERR_FORMAT)
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(log_file, level="DEBUG", format=FILE_FORMAT, rotation=rotation)
    return level


def common_options() -> argparse.ArgumentParser:
    """Options accepted before or after the subcommand"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=argparse.SUPPRESS, help="YAML yapılandırma dosyası")
    common.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS,
                        metavar="SECTION.KEY=VALUE", help="Yapılandırma değerini geçersiz kıl (tekrarlanabilir)")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="DEBUG seviyesinde log")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = common_options()
    parser = argparse.ArgumentParser(
        parents=[common],
        description="cellcompare - RoI ve sınıf düzeyinde örnek karşılaştırmalı hücre tespiti",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Örnekler:
  python main.py generate-data --spec config/dataset_spec.yaml --out data/synthetic
  python main.py train --config config/config.yaml --data data/synthetic/manifest.json --out runs/full
  python main.py eval --checkpoint runs/full/best.pt --data data/synthetic/manifest.json --out reports/eval.json
  python main.py sweep --grid config/sweeps/tau_q.yaml --data data/synthetic/manifest.json --out reports/tau_q.csv
        """
    )
    parser.set_defaults(config="config/config.yaml", overrides=[], verbose=False)

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", parents=[common], help="Sentetik dengesiz veri seti üret")
    gen.add_argument("--spec", type=str, default=None, help="Veri seti tanımı (YAML)")
    gen.add_argument("--out", type=str, required=True, help="Çıktı dizini")

    train = sub.add_parser("train", parents=[common], help="Dedektörü eğit")
    train.add_argument("--data", type=str, default=None, help="manifest.json yolu")
    train.add_argument("--out", type=str, required=True, help="Çalışma dizini (checkpoint + metrics)")
    train.add_argument("--resume", type=str, default=None, help="Devam edilecek checkpoint")
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--device", type=str, default=None)

    ev = sub.add_parser("eval", parents=[common], help="Checkpoint değerlendir")
    ev.add_argument("--checkpoint", type=str, required=True)
    ev.add_argument("--data", type=str, default=None, help="manifest.json yolu")
    ev.add_argument("--out", type=str, required=True, help="Rapor yolu (JSON)")
    ev.add_argument("--split", type=str, default=None)

    sweep = sub.add_parser("sweep", parents=[common], help="Hiperparametre ızgarası üzerinde eğit + değerlendir")
    sweep.add_argument("--grid", type=str, required=True)
    sweep.add_argument("--data", type=str, default=None, help="manifest.json yolu")
    sweep.add_argument("--out", type=str, required=True, help="Tablo yolu (CSV)")

    return parser


def collect_overrides(args: argparse.Namespace):
    """``--set`` pairs, then the explicit training flags on top"""
    from src.orchestrator.config import overrides_from_pairs

    overrides = overrides_from_pairs(args.overrides)
    for flag in ("epochs", "lr", "seed", "device"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[f"training.{flag}"] = value
    return overrides


def run(args: argparse.Namespace) -> int:
    from src.orchestrator.main_orchestrator import MainOrchestrator

    config_path = args.config if args.config and Path(args.config).exists() else None
    if config_path is None:
        logger.warning(f"Config file {args.config} not found, using defaults")
    orchestrator = MainOrchestrator(config_path, collect_overrides(args))
    log_cfg = orchestrator.config.logging
    configure_logging(log_cfg.level, log_cfg.file, log_cfg.rotation, args.verbose)

    if args.command == "generate-data":
        manifest = orchestrator.generate_data(args.spec, args.out)
        print(f"\n🎉 Veri seti hazır: {manifest}")
    elif args.command == "train":
        result = orchestrator.train(args.data, args.out, resume=args.resume)
        print(f"\n🎉 Eğitim tamamlandı: {result.last_checkpoint}")
        if result.best_checkpoint:
            print(f"🏆 En iyi val AP50 = {result.best_ap50:.4f}: {result.best_checkpoint}")
    elif args.command == "eval":
        report = orchestrator.evaluate_checkpoint(args.checkpoint, args.data, args.out, args.split)
        print(f"\n📊 AP={report.ap:.4f} AP50={report.ap50:.4f} AP75={report.ap75:.4f} AR={report.ar:.4f}")
        print(f"📁 Rapor: {args.out}")
    elif args.command == "sweep":
        table = orchestrator.sweep(args.grid, args.data, args.out)
        failed = int((table["status"] != "ok").sum()) if "status" in table else 0
        print(f"\n📁 Tarama tablosu: {args.out} ({len(table)} satır, {failed} başarısız)")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(verbose=args.verbose)

    try:
        return run(args)
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {type(e).__name__}: {e}")
        print("\n❌ İşlem başarısız oldu. Logları kontrol edin.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
