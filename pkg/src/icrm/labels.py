import enum


class ClassLabel(enum.IntEnum):
    """Rhythm classes with their stable integer encoding."""

    AFB = 0
    AFL = 1
    NSR = 2

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).strip().upper()
        if text.isdigit():
            return cls(int(text))
        try:
            return cls[text]
        except KeyError:
            raise ValueError(f"unknown class label {value!r}") from None


N_CLASSES = len(ClassLabel)
