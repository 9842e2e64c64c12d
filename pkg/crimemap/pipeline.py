"""
Pipeline steps behind the CLI.

Each step reads its inputs from and writes its artifacts to the run's output
directory, then records both in ``run_manifest.json`` with their SHA-256
digests and the config hash.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from . import __version__
from .config import PipelineConfig
from .errors import ConfigError, DegenerateInputError
from .evaluation import EvalReport, cross_validate, write_eval_report
from .imagery import (
    DatasetManifest,
    SyntheticTileProvider,
    TileClient,
    TileProvider,
    build_dataset,
    load_dataset,
)
from .imagery.dataset import FETCH_LOG_NAME, MANIFEST_NAME
from .ingest import (
    IngestStats,
    filter_violent,
    log_stats,
    parse_report_file,
    read_reports_jsonl,
    summarize,
    write_reports_csv,
    write_reports_jsonl,
)
from .labeling import (
    CrimeLevel,
    LabeledCell,
    assign_labels,
    balance,
    fit_bins,
    kmeans_bins,
    level_counts,
    read_labels,
    score_regions,
    write_labels,
    write_scores,
)
from .mapping import (
    CityMap,
    MapAgreement,
    load_map,
    map_accuracy,
    official_map,
    predict_map,
    save_map,
    write_map_layers,
)
from .model import (
    ModelParams,
    TrainingLog,
    init_params,
    load_params,
    replace_head,
    save_params,
    train,
)
from .simulation import synth_reports

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"
REPORTS = "reports.jsonl"
INGEST_STATS = "ingest_stats.json"
ROW_ERRORS = "row_errors.tsv"
SCORES = "scores.jsonl"
LABELS = "labels.jsonl"
BALANCED = "balanced.jsonl"
BINS = "bins.json"
DATASET_DIR = "dataset"
MODEL = "model.cmap"
TRAINING_LOG = "training_log.tsv"
MAPS_DIR = "maps"
MAP_ACCURACY = "map_accuracy.json"
SYNTH_REPORTS = "synth_reports.csv"

PathLike = Union[str, Path]


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class RunManifest:
    """
    Inputs and outputs of every step run in one output directory.

    Paths inside the output directory are stored relative to it. A manifest
    written under a different config hash is started afresh.
    """

    root: Path
    config: PipelineConfig
    steps: Dict[str, Dict[str, Dict[str, str]]] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / RUN_MANIFEST

    @classmethod
    def load(cls, root: PathLike, config: PipelineConfig) -> "RunManifest":
        manifest = cls(Path(root), config)
        if not manifest.path.exists():
            return manifest
        try:
            data = json.loads(manifest.path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            logger.warning(f"Ignoring unreadable run manifest {manifest.path}: {e}")
            return manifest
        if data.get("config_hash") == config.config_hash:
            manifest.steps = data.get("steps", {})
        else:
            logger.info(
                "Config changed since the last run; starting a new run manifest"
            )
        return manifest

    def _name(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def record(
        self, step: str, inputs: Iterable[Path], outputs: Iterable[Path]
    ) -> None:
        self.steps[step] = {
            "inputs": {self._name(p): file_sha256(p) for p in inputs if p.is_file()},
            "outputs": {self._name(p): file_sha256(p) for p in outputs if p.is_file()},
        }
        self.save()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": __version__,
            "city": self.config.city,
            "config_hash": self.config.config_hash,
            "config": self.config.to_dict(),
            "steps": self.steps,
        }

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _write_json(self.path, self.to_dict())


class Pipeline:
    """Run the steps of one configured city inside its output directory."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.grid = config.grid_spec()
        self.manifest = RunManifest.load(self.root, config)

    def _path(self, given: Optional[PathLike], default: str) -> Path:
        return Path(given) if given is not None else self.root / default

    def _require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise DegenerateInputError(
                f"{path} not found; run `crimemap {producer}` first"
            )
        return path

    # -- reports -----------------------------------------------------------

    def synth_city(
        self, output: Optional[PathLike] = None, seed: Optional[int] = None
    ) -> Path:
        """Write a synthetic report file in the configured column layout."""
        out = self._path(output, SYNTH_REPORTS)
        seed = self.config.synthetic.seed if seed is None else seed
        reports = synth_reports(self.grid, seed, self.config.synthetic.layout())
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="") as f:
            write_reports_csv(reports, f, self.config.ingest.mapping)
        logger.info(f"Wrote {len(reports)} synthetic reports to {out}")
        self.manifest.record("synth-city", [], [out])
        return out

    def ingest(self, source: PathLike) -> IngestStats:
        source = Path(source)
        reports, errors = parse_report_file(source, self.config.ingest.mapping)
        kept = filter_violent(reports, self.config.ingest.policy)
        stats = summarize(reports, errors, kept)
        log_stats(stats)

        reports_path = self.root / REPORTS
        stats_path = self.root / INGEST_STATS
        errors_path = self.root / ROW_ERRORS
        write_reports_jsonl(kept, reports_path)
        _write_json(
            stats_path, {**stats.to_dict(), "config_hash": self.config.config_hash}
        )
        with open(errors_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("row_number\treason\traw\n")
            for e in errors:
                raw = e.raw.replace("\t", " ").replace("\n", " ")
                f.write(f"{e.row_number}\t{e.reason}\t{raw}\n")
        self.manifest.record(
            "ingest", [source], [reports_path, stats_path, errors_path]
        )
        return stats

    # -- labels ------------------------------------------------------------

    def label(self, reports: Optional[PathLike] = None) -> Dict[CrimeLevel, int]:
        """
        Score cells, fit three-level bins, label every cell, and balance.

        ``reports`` may be the normalized JSON-lines file or a raw delimited
        report file, which is parsed and filtered first.

        Returns:
            Counts per level of the balanced label set
        """
        path = self._require(self._path(reports, REPORTS), "ingest")
        if path.suffix == ".jsonl":
            records = read_reports_jsonl(path)
        else:
            parsed, _ = parse_report_file(path, self.config.ingest.mapping)
            records = filter_violent(parsed, self.config.ingest.policy)
        if not records:
            raise DegenerateInputError(f"No reports to label in {path}")

        scores = score_regions(records, self.grid)
        values = [cs.score for cs in scores.cells]
        binning = self.config.binning
        if binning.method == "kmeans":
            model = kmeans_bins(values, seed=binning.seed, restarts=binning.restarts)
        else:
            model = fit_bins(values, binning.method, seed=binning.seed)
        labeled = assign_labels(scores.cells, model)
        if self.config.balance.enabled:
            balanced = balance(labeled, seed=self.config.balance.seed)
        else:
            balanced = list(labeled)

        scores_path = self.root / SCORES
        labels_path = self.root / LABELS
        balanced_path = self.root / BALANCED
        bins_path = self.root / BINS
        write_scores(scores_path, scores)
        write_labels(labels_path, labeled, self.grid)
        write_labels(balanced_path, balanced, self.grid)
        counts = level_counts(balanced)
        _write_json(
            bins_path,
            {
                **model.to_dict(),
                "outside": scores.outside,
                "counts": {
                    level.label: n for level, n in level_counts(labeled).items()
                },
                "balanced_counts": {level.label: n for level, n in counts.items()},
                "grid": self.grid.to_dict(),
                "config_hash": self.config.config_hash,
            },
        )
        summary = {level.label: n for level, n in counts.items()}
        logger.info(f"label_summary {json.dumps(summary)}")
        self.manifest.record(
            "label", [path], [scores_path, labels_path, balanced_path, bins_path]
        )
        return counts

    def _official_labels(self, labels: Optional[PathLike] = None) -> List[LabeledCell]:
        return read_labels(self._require(self._path(labels, LABELS), "label"))

    # -- imagery -----------------------------------------------------------

    def provider(self, labels: Optional[List[LabeledCell]] = None) -> TileProvider:
        """
        The configured tile source. The synthetic provider draws each cell's
        texture from its official label, so it needs ``labels.jsonl``.
        """
        imagery = self.config.imagery
        if imagery.provider == "remote":
            return TileClient(imagery.provider_config())
        if labels is None:
            labels = self._official_labels()
        return SyntheticTileProvider(
            self.grid, {c.cell: c.level for c in labels}, seed=imagery.synthetic_seed
        )

    def fetch(self, cells: Optional[PathLike] = None) -> DatasetManifest:
        """Build the tile dataset for the balanced (or given) label set."""
        cells_path = self._require(self._path(cells, BALANCED), "label")
        targets = read_labels(cells_path)
        imagery = self.config.imagery
        out = self.root / DATASET_DIR
        manifest = build_dataset(
            targets,
            self.provider(),
            self.grid,
            out,
            zoom=imagery.zoom,
            size_px=imagery.size_px,
            workers=self.config.workers,
            max_failure_fraction=imagery.max_failure_fraction,
        )
        self.manifest.record(
            "fetch", [cells_path], [out / MANIFEST_NAME, out / FETCH_LOG_NAME]
        )
        return manifest

    # -- model -------------------------------------------------------------

    def _dataset_manifest(self, dataset: Optional[PathLike]) -> DatasetManifest:
        path = self._path(dataset, DATASET_DIR)
        self._require(path, "fetch")
        return DatasetManifest.read(path)

    def _train(
        self,
        init: ModelParams,
        step: str,
        dataset: Optional[PathLike],
        inputs: List[Path],
    ) -> Tuple[ModelParams, TrainingLog]:
        manifest = self._dataset_manifest(dataset)
        data = load_dataset(manifest, init.arch.input_shape)
        params, log = train(init, data, self.config.train)
        params.metadata["config_hash"] = self.config.config_hash
        params.metadata["city"] = self.config.city

        model_path = self.root / MODEL
        log_path = self.root / TRAINING_LOG
        save_params(params, model_path)
        log.write(log_path)
        self.manifest.record(step, [manifest.path, *inputs], [model_path, log_path])
        return params, log

    def train(
        self, dataset: Optional[PathLike] = None
    ) -> Tuple[ModelParams, TrainingLog]:
        """Train a freshly initialized model of the configured architecture."""
        init = init_params(self.config.model.arch_spec(), seed=self.config.train.seed)
        return self._train(init, "train", dataset, [])

    def finetune(
        self, source_model: PathLike, dataset: Optional[PathLike] = None
    ) -> Tuple[ModelParams, TrainingLog]:
        """Replace the head of a trained model and train it on this city's tiles."""
        source = Path(source_model)
        pretrained = load_params(source)
        init = replace_head(
            pretrained,
            classes=len(CrimeLevel),
            seed=self.config.train.seed,
            pretrained_multiplier=self.config.train.pretrained_multiplier,
        )
        return self._train(init, "finetune", dataset, [source])

    def evaluate(self, dataset: Optional[PathLike] = None) -> EvalReport:
        manifest = self._dataset_manifest(dataset)
        report = cross_validate(
            manifest,
            self.config.split,
            self.config.train,
            arch=self.config.model.arch_spec(),
            config_hash=self.config.config_hash,
        )
        written = write_eval_report(report, self.root)
        self.manifest.record("eval", [manifest.path], written)
        return report

    # -- maps --------------------------------------------------------------

    def predicted_map_path(self) -> Path:
        return self.root / MAPS_DIR / f"{self.config.city}_predicted.json"

    def official_map_path(self) -> Path:
        return self.root / MAPS_DIR / f"{self.config.city}_official.json"

    def predict(
        self, model: Optional[PathLike] = None, labels: Optional[PathLike] = None
    ) -> Tuple[CityMap, Optional[MapAgreement]]:
        """
        Predict a label for every grid cell with a trained model.

        When the city's official labels exist, the official map is written
        alongside and the agreement lands in ``map_accuracy.json``.
        """
        model_path = self._require(self._path(model, MODEL), "train")
        params = load_params(model_path)
        labels_path = self._path(labels, LABELS)
        official = read_labels(labels_path) if labels_path.exists() else None
        provider = self.provider(official)
        imagery = self.config.imagery
        ids: Dict[str, Optional[str]] = {
            "model_id": file_sha256(model_path),
            "config_hash": self.config.config_hash,
        }
        bins_path = self.root / BINS
        if bins_path.exists():
            ids["bins_id"] = file_sha256(bins_path)

        predicted = predict_map(
            params,
            provider,
            self.grid,
            zoom=imagery.zoom,
            size_px=imagery.size_px,
            city=self.config.city,
            workers=self.config.workers,
            max_failure_fraction=imagery.max_failure_fraction,
            **ids,
        )
        predicted_path = self.predicted_map_path()
        predicted_path.parent.mkdir(parents=True, exist_ok=True)
        save_map(predicted, predicted_path)
        outputs = [predicted_path]
        inputs = [model_path]

        agreement = None
        if official is not None:
            reference = official_map(
                official,
                self.grid,
                city=self.config.city,
                bins_id=ids.get("bins_id"),
                config_hash=self.config.config_hash,
            )
            official_path = self.official_map_path()
            save_map(reference, official_path)
            agreement = map_accuracy(predicted, reference)
            accuracy_path = self.root / MAP_ACCURACY
            _write_json(
                accuracy_path,
                {**agreement.to_dict(), "config_hash": self.config.config_hash},
            )
            logger.info(f"map_accuracy {json.dumps({'accuracy': agreement.accuracy})}")
            outputs += [official_path, accuracy_path]
            inputs.append(labels_path)
        self.manifest.record("predict-map", inputs, outputs)
        return predicted, agreement

    def render(self, maps: Iterable[PathLike] = ()) -> List[Path]:
        """Render saved maps (default: every map under ``maps/``) to GeoJSON and PNG."""
        sources = [Path(p) for p in maps]
        if not sources:
            sources = sorted((self.root / MAPS_DIR).glob("*.json"))
        if not sources:
            raise DegenerateInputError(
                f"No maps found in {self.root / MAPS_DIR}; "
                "run `crimemap predict-map` first"
            )
        settings = self.config.render
        written: List[Path] = []
        for source in sources:
            city_map = load_map(source)
            written += write_map_layers(
                city_map,
                self.root / MAPS_DIR,
                settings.palette(),
                settings.scale_px_per_cell,
            )
        self.manifest.record("render", sources, written)
        return written

    # -- everything --------------------------------------------------------

    def full_run(self, source: Optional[PathLike] = None) -> Dict[str, Any]:
        """
        Run every step in order. Without a report file, a synthetic city is
        generated first.
        """
        if source is None:
            if self.config.imagery.provider != "synthetic":
                raise ConfigError(
                    "A report file is required unless imagery.provider is synthetic"
                )
            source = self.synth_city()
        stats = self.ingest(source)
        counts = self.label()
        self.fetch()
        report = self.evaluate()
        _, log = self.train()
        _, agreement = self.predict()
        self.render()
        return {
            "rows_after_filter": stats.rows_after_filter,
            "balanced_counts": {level.label: n for level, n in counts.items()},
            "mean_accuracy": report.mean_accuracy,
            "final_loss": log.records[-1].loss if log.records else None,
            "map_accuracy": agreement.accuracy if agreement else None,
        }
