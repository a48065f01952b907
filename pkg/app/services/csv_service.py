"""
CSV reading, validation and writing for homodyne samples, joint records
and kernel tables.
"""
import csv
import io
import logging
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from app.core.errors import FileFormatError
from app.schemas.schemas import JointRecordSet, SampleSet, ValidationResult

logger = logging.getLogger(__name__)

SAMPLE_COLUMNS = ("phi", "x")
JOINT_COLUMNS = ("n", "phi", "x")
KERNEL_COLUMNS = ("n", "m", "x", "phi", "eta", "re", "im")


class CSVService:
    """Service for CSV file processing and validation."""

    def __init__(self):
        self.integer_columns = {"n", "m"}

    def validate_and_process(
        self,
        file_content: bytes,
        columns: Sequence[str],
    ) -> Tuple[List[Dict[str, float]], List[ValidationResult]]:
        """
        Validate and parse CSV content with the required numeric columns.

        Returns:
            Tuple of (parsed_rows, validation_results)
        """
        validations: List[ValidationResult] = []
        rows: List[Dict[str, float]] = []

        try:
            try:
                content = file_content.decode("utf-8")
            except UnicodeDecodeError:
                content = file_content.decode("latin-1")

            reader = csv.DictReader(io.StringIO(content))

            if not reader.fieldnames:
                validations.append(ValidationResult(
                    validation_type="structure_error",
                    message="El archivo CSV no tiene encabezados",
                    severity="error"
                ))
                return rows, validations

            header = [name.strip() for name in reader.fieldnames]
            missing = [c for c in columns if c not in header]
            if missing:
                validations.append(ValidationResult(
                    validation_type="structure_error",
                    message=f"Faltan columnas requeridas: {', '.join(missing)}",
                    severity="error"
                ))
                return rows, validations

            for row_num, raw in enumerate(reader, start=2):  # 1 is the header
                row = {k.strip(): v for k, v in raw.items() if k is not None}
                parsed: Dict[str, float] = {}
                for col_name in columns:
                    value = row.get(col_name)
                    if value is None or str(value).strip() == "":
                        validations.append(ValidationResult(
                            validation_type="empty_value",
                            row_number=row_num,
                            column_name=col_name,
                            message=f"Valor vacío en columna '{col_name}'",
                            severity="error"
                        ))
                        continue
                    number = self._to_number(value)
                    if number is None:
                        validations.append(ValidationResult(
                            validation_type="invalid_type",
                            row_number=row_num,
                            column_name=col_name,
                            message=f"Tipo incorrecto ('{value}') en columna '{col_name}' - se esperaba número",
                            severity="error"
                        ))
                        continue
                    if col_name in self.integer_columns and (number < 0 or number != int(number)):
                        validations.append(ValidationResult(
                            validation_type="invalid_value",
                            row_number=row_num,
                            column_name=col_name,
                            message=f"Valor inválido ('{value}') en columna '{col_name}' - se esperaba entero >= 0",
                            severity="error"
                        ))
                        continue
                    parsed[col_name] = number
                if len(parsed) == len(columns):
                    rows.append(parsed)

            if not rows and not validations:
                validations.append(ValidationResult(
                    validation_type="empty_file",
                    message="El archivo CSV no contiene datos",
                    severity="error"
                ))

        except csv.Error as e:
            validations.append(ValidationResult(
                validation_type="parse_error",
                message=f"Error al parsear CSV: {str(e)}",
                severity="error"
            ))

        return rows, validations

    def _to_number(self, value: Any) -> float | None:
        try:
            number = float(str(value).strip())
        except (ValueError, TypeError):
            return None
        return number if np.isfinite(number) else None

    def _parse(self, file_content: bytes, columns: Sequence[str]) -> List[Dict[str, float]]:
        rows, validations = self.validate_and_process(file_content, columns)
        errors = [v for v in validations if v.severity == "error"]
        if errors:
            first = errors[0]
            where = f" (fila {first.row_number})" if first.row_number else ""
            raise FileFormatError(f"{first.message}{where}; {len(errors)} error(es)", validations)
        return rows

    # ==================== Readers ====================

    def read_samples(self, file_content: bytes) -> SampleSet:
        """Homodyne samples from a `phi,x` CSV."""
        rows = self._parse(file_content, SAMPLE_COLUMNS)
        return SampleSet.from_arrays([r["phi"] for r in rows], [r["x"] for r in rows])

    def read_joint_records(self, file_content: bytes) -> JointRecordSet:
        """Joint records from an `n,phi,x` CSV."""
        rows = self._parse(file_content, JOINT_COLUMNS)
        return JointRecordSet.from_arrays(
            [int(r["n"]) for r in rows],
            [r["phi"] for r in rows],
            [r["x"] for r in rows],
        )

    # ==================== Writers ====================

    def write_samples(self, samples: SampleSet) -> bytes:
        """`phi,x` CSV with repr-exact floats."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(SAMPLE_COLUMNS)
        writer.writerows((repr(float(p)), repr(float(x))) for p, x in zip(samples.phi, samples.x))
        return buffer.getvalue().encode("utf-8")

    def write_joint_records(self, records: JointRecordSet) -> bytes:
        """`n,phi,x` CSV with repr-exact floats."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(JOINT_COLUMNS)
        writer.writerows(
            (int(n), repr(float(p)), repr(float(x)))
            for n, p, x in zip(records.n, records.phi, records.x)
        )
        return buffer.getvalue().encode("utf-8")

    def write_kernel_table(self, rows: List[tuple]) -> bytes:
        """`n,m,x,phi,eta,re,im` CSV with 12 significant digits."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(KERNEL_COLUMNS)
        for n, m, x, phi, eta, re, im in rows:
            writer.writerow((int(n), int(m), *(f"{float(v):.12g}" for v in (x, phi, eta, re, im))))
        return buffer.getvalue().encode("utf-8")


# Singleton instance
_csv_service: CSVService | None = None


def get_csv_service() -> CSVService:
    """Get CSV service singleton."""
    global _csv_service
    if _csv_service is None:
        _csv_service = CSVService()
    return _csv_service
