"""Exception hierarchy shared across the package."""


class HyperIdError(Exception):
    """Base class for all package errors."""


class DegenerateElement(HyperIdError):
    pass


class UnknownBoundaryTag(HyperIdError):
    pass


class NonPositiveJacobian(HyperIdError):
    pass


class DomainError(HyperIdError, ValueError):
    pass


class UnknownModel(HyperIdError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ElementInversion(HyperIdError):
    def __init__(self, element_index, step=None):
        self.element_index = int(element_index)
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"element {self.element_index} inverted (det F <= 0){where}")


class NoConvergence(HyperIdError):
    def __init__(self, step, final_residual):
        self.step = step
        self.final_residual = float(final_residual)
        super().__init__(f"Newton failed at step {step}, residual {self.final_residual:.3e}")


class GeometryError(HyperIdError):
    pass


class MeshingFailure(HyperIdError):
    pass


class SingularKernel(HyperIdError):
    pass


class PointOutsideDomain(HyperIdError):
    pass


class SchemaError(HyperIdError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonFiniteLoss(HyperIdError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


class AllMembersFailed(HyperIdError):
    pass


class UnknownPath(HyperIdError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DegenerateTruth(HyperIdError):
    pass


class MissingModel(HyperIdError):
    pass
