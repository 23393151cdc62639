from docx import Document
from docx.enum.text import WD_ALIGN_PARAGRAPH
from docx.shared import Pt
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config import RunConfig, to_flat
from metrics import EvalReport

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = [("variant", "Variant"), ("final_iou", "Final train IoU"), ("ao", "AO"),
                    ("sr_050", "SR 0.5"), ("epochs_to_iou_0_5", "Epochs to IoU 0.5")]
EVAL_COLUMNS = [("seq_id", "Sequence"), ("frames", "Frames"), ("ao", "AO"), ("sr_050", "SR 0.5"),
                ("sr_075", "SR 0.75"), ("success_auc", "AUC"), ("precision_20px_equivalent", "Prec."),
                ("norm_precision", "Norm. prec.")]


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class ExperimentReportGenerator:
    """Word reports for ablation tables and evaluation runs"""

    def __init__(self, output_dir: str = "runs"):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def _new_document(self, title_text: str) -> Document:
        doc = Document()

        # Add title with formatting
        title = doc.add_heading(title_text, level=1)
        title.alignment = WD_ALIGN_PARAGRAPH.CENTER

        p = doc.add_paragraph()
        p.alignment = WD_ALIGN_PARAGRAPH.CENTER
        run = p.add_run(f"Generated {datetime.now().strftime('%Y-%m-%d %H:%M')}")
        run.italic = True
        return doc

    def _add_table(self, doc: Document, header: Sequence[str], rows: List[Sequence[str]]):
        table = doc.add_table(rows=1, cols=len(header))
        table.style = "Table Grid"
        for cell, text in zip(table.rows[0].cells, header):
            cell.text = text
            for paragraph in cell.paragraphs:
                for run in paragraph.runs:
                    run.bold = True
        for row in rows:
            cells = table.add_row().cells
            for cell, text in zip(cells, row):
                cell.text = text
                for paragraph in cell.paragraphs:
                    for run in paragraph.runs:
                        run.font.size = Pt(9)
        return table

    def _add_config_section(self, doc: Document, cfg: RunConfig):
        doc.add_heading("Configuration", level=2)
        flat = to_flat(cfg)
        self._add_table(doc, ["Key", "Value"], [[k, _fmt(v)] for k, v in flat.items()])

    def create_ablation_report(self, table: pd.DataFrame, base_cfg: RunConfig,
                               variants: Optional[Sequence[Tuple[str, Dict]]] = None) -> str:
        """Results table, per-variant overrides and the shared configuration"""
        logger.info(f"Creating ablation report for {len(table)} variants")
        doc = self._new_document("Assignment Ablation Report")

        # Section 1: results
        doc.add_heading("1. Results", level=2)
        records = table.to_dict("records")
        for record in records:
            # NaN-padded column comes back as float
            epochs = record.get("epochs_to_iou_0_5")
            record["epochs_to_iou_0_5"] = None if epochs is None or pd.isna(epochs) else int(epochs)
        rows = [[_fmt(record.get(key)) for key, _ in ABLATION_COLUMNS] for record in records]
        self._add_table(doc, [label for _, label in ABLATION_COLUMNS], rows)

        # Section 2: what each variant changes
        doc.add_heading("2. Variants", level=2)
        for name, overrides in variants or []:
            p = doc.add_paragraph()
            p.add_run(f"{name}: ").bold = True
            p.add_run(", ".join(f"{k}={v}" for k, v in overrides.items()) or "base configuration")

        self._add_config_section(doc, base_cfg)

        output_path = self.output_dir / "ablation_report.docx"
        doc.save(output_path)
        logger.info(f"Document saved: {output_path}")
        return str(output_path)

    def create_eval_report(self, report: EvalReport, checkpoint: Optional[str] = None) -> str:
        """Summary metrics and the per-sequence breakdown"""
        logger.info(f"Creating evaluation report for {report.n_sequences} sequences")
        doc = self._new_document("Tracking Evaluation Report")
        if checkpoint:
            doc.add_paragraph(f"Checkpoint: {checkpoint}")
        doc.add_paragraph(f"{report.n_sequences} sequences, {report.n_frames} scored frames")

        doc.add_heading("1. Summary", level=2)
        self._add_table(doc, ["Metric", "Value"], [[k, _fmt(v)] for k, v in report.summary().items()])

        doc.add_heading("2. Per-sequence breakdown", level=2)
        rows = [[_fmt(row.get(key)) for key, _ in EVAL_COLUMNS] for row in report.per_sequence]
        self._add_table(doc, [label for _, label in EVAL_COLUMNS], rows)

        output_path = self.output_dir / "eval_report.docx"
        doc.save(output_path)
        logger.info(f"Document saved: {output_path}")
        return str(output_path)
