"""Error type shared by every module.

Each failure carries a short machine-readable ``code`` (e.g. ``"ctc-infeasible"``)
so callers and the CLI can branch on it without parsing messages.
"""


class FNTError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)
