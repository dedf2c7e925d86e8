from mopidy.exceptions import MopidyException


class MinimonError(MopidyException):
    pass


class InvalidNameError(MinimonError):

    def __init__(self, token, what='name'):
        super(InvalidNameError, self).__init__(
            'Invalid {}: {!r}'.format(what, token))
        self.token = token


class ConfigError(MinimonError):
    pass


class RegistrationError(MinimonError):

    def __init__(self, message, reason=None):
        super(RegistrationError, self).__init__(message)
        self.reason = reason


class ExpositionError(MinimonError):

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = 'line {}, column {}: {}'.format(line, column, message)
        super(ExpositionError, self).__init__(message)
        self.line = line
        self.column = column


class BusError(MinimonError):
    pass


class OffsetError(BusError):
    pass


class WriteRejected(MinimonError):

    def __init__(self, reason, detail=''):
        super(WriteRejected, self).__init__(
            '{}: {}'.format(reason.name, detail) if detail else reason.name)
        self.reason = reason
        self.detail = detail


class QueryError(MinimonError):

    def __init__(self, message, position=None):
        self.reason = message
        if position is not None:
            message = '{} at position {}'.format(message, position)
        super(QueryError, self).__init__(message)
        self.position = position


class PartitionError(MinimonError):
    pass


class SubjectError(MinimonError):
    pass


class PermissionDenied(MinimonError):
    pass


class ServiceError(MinimonError):

    def __init__(self, message, status=None, payload=None):
        super(ServiceError, self).__init__(message)
        self.status = status
        self.payload = payload or {}


class MalformedDocument(MinimonError):
    pass


class ServiceUnreachable(MinimonError):
    pass
