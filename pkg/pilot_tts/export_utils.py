"""
Export Utilities - CSV logs, JSON metadata and printed summaries
"""
import csv
import io
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

RULE = "=" * 60
THIN_RULE = "-" * 60

LOSS_COLUMNS = ('step', 'loss')
ABLATION_COLUMNS = ('config', 'seed', 'token_acc', 'sim_proxy')


class ExportUtils:
    """
    Write run artifacts and format the summaries the CLI prints
    """

    @staticmethod
    def loss_csv(rows: Iterable[Tuple[int, float]]) -> str:
        """
        Loss log as CSV text

        Args:
            rows: (step, loss) pairs

        Returns:
            CSV with a 'step,loss' header
        """
        output = io.StringIO()
        writer = csv.writer(output, lineterminator='\n')
        writer.writerow(LOSS_COLUMNS)
        for step, loss in rows:
            writer.writerow([int(step), repr(float(loss))])
        return output.getvalue()

    @staticmethod
    def write_loss_csv(path: Union[str, Path], rows: Iterable[Tuple[int, float]]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ExportUtils.loss_csv(rows), encoding='utf-8')
        return path

    @staticmethod
    def read_loss_csv(path: Union[str, Path]) -> List[Tuple[int, float]]:
        with Path(path).open(encoding='utf-8', newline='') as f:
            return [(int(row['step']), float(row['loss'])) for row in csv.DictReader(f)]

    @staticmethod
    def write_ablation_csv(path: Union[str, Path], rows: Sequence[Dict]) -> Path:
        """One row per (config, seed) with token_acc and sim_proxy."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator='\n',
                                    extrasaction='ignore')
            writer.writeheader()
            for row in rows:
                writer.writerow({
                    'config': row['config'],
                    'seed': int(row['seed']),
                    'token_acc': f"{row['token_acc']:.6f}",
                    'sim_proxy': f"{row['sim_proxy']:.6f}",
                })
        return path

    @staticmethod
    def export_to_json(data: Dict, pretty: bool = True) -> str:
        """
        Serialize metadata deterministically (sorted keys)

        Args:
            data: JSON-compatible dictionary
            pretty: Indent the output

        Returns:
            JSON text ending in a newline
        """
        if pretty:
            return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n"
        return json.dumps(data, sort_keys=True, ensure_ascii=False, default=str) + "\n"

    @staticmethod
    def curation_report(summary: Dict) -> str:
        """Kept/total line plus the rejection histogram in a fixed layout."""
        report = ["", RULE, "CURATION SUMMARY", RULE]
        report.append(f"Total records: {summary['total']}")
        report.append(f"Kept records:  {summary['kept']}")
        report.append(f"Rejected:      {summary['total'] - summary['kept']}")
        reasons = summary.get('reasons', {})
        if reasons:
            report.append(THIN_RULE)
            report.append(f"{'reason':<24}{'count':>8}")
            for reason, count in reasons.items():
                report.append(f"{reason:<24}{count:>8}")
        report.append(RULE)
        return "\n".join(report)

    @staticmethod
    def training_report(stage: str, steps: int, initial_loss: float, final_loss: float,
                        checkpoint: Path, loss_log: Path) -> str:
        report = ["", RULE, f"TRAINING SUMMARY ({stage})", RULE]
        report.append(f"Steps:         {steps}")
        report.append(f"Initial loss:  {initial_loss:.6f}")
        report.append(f"Final loss:    {final_loss:.6f}")
        report.append(f"Checkpoint:    {checkpoint}")
        report.append(f"Loss log:      {loss_log}")
        report.append(RULE)
        return "\n".join(report)

    @staticmethod
    def ablation_report(rows: Sequence[Dict], steps: int) -> str:
        report = ["", RULE, "ABLATION SUMMARY", RULE]
        report.append(f"Step budget per config: {steps}")
        report.append(THIN_RULE)
        report.append(f"{'config':<10}{'seed':>6}{'token_acc':>12}{'sim_proxy':>12}")
        for row in rows:
            report.append(f"{row['config']:<10}{row['seed']:>6}"
                          f"{row['token_acc']:>12.4f}{row['sim_proxy']:>12.4f}")
        report.append(RULE)
        return "\n".join(report)

    @staticmethod
    def selfcheck_report(results: Sequence[Tuple[str, bool, str]]) -> str:
        report = ["", RULE, "SELF-CHECK", RULE]
        for name, passed, detail in results:
            report.append(f"{'PASS' if passed else 'FAIL':<6}{name:<34}{detail}")
        report.append(RULE)
        return "\n".join(report)
