"""Fixed mapping between the 52 letters and class indices."""

from __future__ import annotations

import string

__all__ = ["LETTERS", "LabelMap", "LABELS"]

# lower case first, then upper case
LETTERS = string.ascii_lowercase + string.ascii_uppercase


class LabelMap:
    """Bijection letter <-> index: 'a'..'z' -> 0..25, 'A'..'Z' -> 26..51."""

    def __init__(self, letters: str = LETTERS) -> None:
        if len(set(letters)) != len(letters):
            raise ValueError("letters must be unique")
        self.letters = letters
        self._index = {c: i for i, c in enumerate(letters)}

    def __len__(self) -> int:
        return len(self.letters)

    def __contains__(self, char: object) -> bool:
        return char in self._index

    def index(self, char: str) -> int:
        try:
            return self._index[char]
        except KeyError:
            raise KeyError(f"unknown label {char!r}") from None

    def char(self, index: int) -> str:
        if not 0 <= index < len(self.letters):
            raise IndexError(f"class index {index} out of range")
        return self.letters[index]


LABELS = LabelMap()
