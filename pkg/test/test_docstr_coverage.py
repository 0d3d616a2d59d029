import inspect
import re
from pathlib import Path
import unittest

from interrogate import config, coverage

PROJECT_ROOT = Path(__file__).parent.parent


def interrogate_settings() -> config.InterrogateConfig:
    """Docstring coverage settings from the [tool.interrogate] table of pyproject.toml"""
    settings = config.parse_pyproject_toml(config.find_project_config([str(PROJECT_ROOT)]))
    accepted = inspect.signature(config.InterrogateConfig).parameters
    options = {key: value for key, value in settings.items() if key in accepted}
    if 'ignore_regex' in accepted:
        options['ignore_regex'] = [re.compile(pattern) for pattern in settings.get('ignore_regex', [])]
    return config.InterrogateConfig(**options)


class TestDocStringsCoverage(unittest.TestCase):
    def test_using_interrogate(self):
        """Package modules, classes and functions must meet the docstring coverage floor"""
        interrogate_config = interrogate_settings()
        cov = coverage.InterrogateCoverage(paths=[str(PROJECT_ROOT / 'tinyloc')], conf=interrogate_config)
        results = cov.get_coverage()
        covered_percent = round(results.covered * 100 / results.total, 2)
        print("\n")
        cov.print_results(results, None, 1)
        self.assertGreaterEqual(covered_percent, interrogate_config.fail_under,
                                'Required minimum percent of code covered by docstrings not achieved.')


if __name__ == '__main__':
    unittest.main()
