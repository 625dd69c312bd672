from typing import List, Optional


class FlowTrialError(Exception):
    """Base class for every error raised by the harness"""


class ConfigurationError(FlowTrialError):
    pass


class TopicExistsError(ConfigurationError):
    pass


class BusError(FlowTrialError):
    pass


class UnknownTopicError(BusError):
    pass


class UnknownGroupError(BusError):
    pass


class UnknownPartitionError(BusError):
    pass


class OffsetOutOfRangeError(BusError):
    pass


class ClockViolationError(FlowTrialError):
    """Workload clock did not advance by exactly one simulated second"""


class ClockRegressionError(FlowTrialError):
    """A pipeline was asked to advance to a time before its own clock"""


class PipelineFatalError(FlowTrialError):
    def __init__(self, pipeline_id: str, message: str):
        super().__init__(f"{pipeline_id}: {message}")
        self.pipeline_id = pipeline_id


class ScenarioError(FlowTrialError):
    pass


class MetricsImportError(FlowTrialError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class PlanValidationError(FlowTrialError):
    def __init__(self, violations: List[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class ResourceBudgetExceededError(FlowTrialError):
    pass


class ProvisioningError(FlowTrialError):
    pass


class MigrationError(FlowTrialError):
    pass


class PromotionError(FlowTrialError):
    pass


class RunDirectoryError(FlowTrialError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path
