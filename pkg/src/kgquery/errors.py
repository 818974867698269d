"""Exception types raised across the package."""


class KGQueryError(Exception):
    """Base class for all errors raised by kgquery."""


class TripleParseError(KGQueryError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SplitError(KGQueryError, ValueError):
    pass


class QuerySyntaxError(KGQueryError, ValueError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"at position {position}: {message}"
        super().__init__(message)


class ResolutionError(KGQueryError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class GrammarError(KGQueryError, ValueError):
    pass


class ExecutionError(KGQueryError, RuntimeError):
    def __init__(self, message, instruction=None, sample=None):
        self.instruction = instruction
        self.sample = sample
        where = []
        if sample is not None:
            where.append(f"sample {sample}")
        if instruction is not None:
            where.append(f"instruction {instruction}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class NumericError(KGQueryError, ArithmeticError):
    pass


class CheckpointError(KGQueryError, ValueError):
    pass


class GenerationError(KGQueryError, RuntimeError):
    pass


class ProtocolError(KGQueryError, ValueError):
    pass
