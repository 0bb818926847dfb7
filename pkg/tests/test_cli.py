"""Tests for CLI entry point"""

from unittest.mock import patch
import pytest
from smore.__main__ import main


class TestCLIEntryPoint:
    """Test suite for CLI entry point"""

    def test_main_exits_with_run_status(self) -> None:
        """Should raise SystemExit carrying run()'s exit code"""
        with patch("smore.__main__.run", return_value=2) as mock_run:
            with pytest.raises(SystemExit) as exc_info:
                main()
        mock_run.assert_called_once()
        assert exc_info.value.code == 2
