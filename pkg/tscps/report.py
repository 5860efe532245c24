import json
from typing import Any

import numpy as np

from .logging_config import logger


def to_builtin(value: Any) -> Any:
    """
    Convert numpy scalars and arrays (also nested in dicts and lists) to plain Python objects for JSON output.

    :param value: Any value that may contain numpy objects.
    :return: The same value made of builtins only.
    """
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


class Report:
    """
    Summary of one command run (sampling, evaluation, verification, benchmark), written as JSON next to its tables.

    :param data: The summary values; numpy values are allowed.
    :type data: dict, optional
    :param comment: Free-text note stored under ``comment`` in the JSON output.
    :type comment: str, optional
    :raises TypeError: If ``data`` is not a dictionary.
    """

    def __init__(self, data: dict | None = None, comment: str = ''):
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise TypeError(f'Report data should be a dict, not {type(data).__name__}')
        self.data: dict = data
        self.comment: str = comment

    def __getitem__(self, key: str) -> Any:
        """
        :return: The value stored under ``key``, or ``None`` for a missing key.
        """
        return self.data.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self.data

    def __len__(self) -> int:
        return len(self.data)

    def to_dict(self) -> dict:
        """
        The values (and the comment, when set) as builtins only.
        """
        result = to_builtin(self.data)
        if self.comment:
            result['comment'] = self.comment
        return result

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=4, allow_nan=True)

    def save_as_json(self, filename: str) -> None:
        with open(filename, 'w') as file:
            file.write(self.to_json())
        logger.info(f"Report written to {filename}")

    def __repr__(self) -> str:
        return f"Report(data={self.data!r}, comment={self.comment!r})"

    def __str__(self) -> str:
        lines = [f"{key}: {value}" for key, value in self.data.items() if not isinstance(value, (list, dict))]
        if self.comment:
            lines.append(f"# {self.comment}")
        return '\n'.join(lines)
