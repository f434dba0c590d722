"""Error type shared by every module.

Each failure carries a short machine-readable ``code`` (``"shape"``,
``"config"``, ``"format"`` ...) that the command line maps to exit codes.
"""


class CacpsError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message

