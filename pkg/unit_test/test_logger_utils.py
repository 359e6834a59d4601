import logging
import sys

from pyslucache.logger_utils import InfoLevelFormatter, logger, setup_logger


def make_record(level=logging.INFO, category=None):
    record = logging.LogRecord("pyslucache", level, __file__, 1, "hello", None, None)
    if category is not None:
        record.category = category
    return record


class TestFormatter:
    """Test category colouring"""

    def test_category_colour(self):
        """Known categories pick their colour, unknown ones fall back to the default"""
        formatter = InfoLevelFormatter("%(message)s")
        assert formatter.format(make_record(category="CACHE")) == "\033[34mhello\033[0m"
        assert formatter.format(make_record(category="NOPE")) == "\033[0mhello\033[0m"

    def test_warnings_are_red(self):
        """Warnings ignore their category"""
        formatter = InfoLevelFormatter("%(message)s")
        assert formatter.format(make_record(logging.WARNING, "RESULT")).startswith("\033[31m")


class TestSetup:
    """Test handler wiring"""

    def test_file_handler_and_no_duplicates(self, tmp_path, monkeypatch):
        """Repeated setup keeps one console handler and writes a log file"""
        monkeypatch.setattr(sys, "excepthook", sys.excepthook)
        try:
            setup_logger(str(tmp_path), run_mode="PROD")
            setup_logger(str(tmp_path), run_mode="PROD")
            assert len(logger.handlers) == 2
            logger.info("written")
            for handler in logger.handlers:
                handler.flush()
            logs = list(tmp_path.glob("pyslucache_*.log"))
            assert logs
            assert any("written" in path.read_text(encoding="utf-8") for path in logs)
        finally:
            for handler in list(logger.handlers):
                handler.close()
                logger.removeHandler(handler)

    def test_regression_mode_adds_nothing(self):
        """REGR leaves the handlers alone"""
        before = list(logger.handlers)
        setup_logger(run_mode="REGR")
        assert logger.handlers == before
