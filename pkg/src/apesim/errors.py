"""Exception hierarchy shared by every module."""


class SimulationError(Exception):
    """Base class for all errors raised by the simulator."""


class ConfigError(SimulationError):
    """Invalid scenario, preset or calibration input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ScheduleError(ConfigError):
    """An event was scheduled before the current simulated time."""


class FrameCorruptionError(SimulationError):
    """A word stream could not be parsed into frames."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (word offset {offset})")


class ProtectionFault(SimulationError):
    """Access to a page that was never registered with the NIC."""

    def __init__(self, node, kind, vaddr):
        self.node = node
        self.kind = kind
        self.vaddr = vaddr
        super().__init__(f"node {node}: unregistered {kind} address {vaddr:#x}")
