import json
import logging
import os

logger = logging.getLogger(__name__)


class JSONReport:
    """
    A nested dictionary addressed by slash-separated paths, used for evaluation reports and run manifests, e.g.
    report.set_contents_at_path('imputation/win_rate', 0.7)
    """

    def __init__(self, contents: dict = None):
        self.json: dict = {} if contents is None else contents

    def __repr__(self):
        return str(self.json)

    @staticmethod
    def _split(path: str) -> list:
        parts = [part for part in path.strip('/').split('/') if part]
        if not parts:
            raise KeyError(f'Empty report path "{path}"')
        return parts

    def get_contents_at_path(self, path: str):
        """
        Returns the contents at the given path.
        :param path: Slash-separated path
        :return: The stored object
        :raises KeyError: If any element of the path is missing
        """
        cursor_element = self.json
        for path_element in self._split(path):
            if not isinstance(cursor_element, dict) or path_element not in cursor_element:
                raise KeyError(path)
            cursor_element = cursor_element[path_element]
        return cursor_element

    def set_contents_at_path(self, path: str, contents, create_if_nonexistent: bool = True):
        """
        Sets the contents at the given path
        :param path: Slash-separated path to the entry to write
        :param contents: JSON-serialisable value
        :param create_if_nonexistent: Whether to create missing intermediate levels; defaults to true
        """
        path_list = self._split(path)
        cursor_element = self.json
        for path_element in path_list[:-1]:
            if path_element not in cursor_element:
                if not create_if_nonexistent:
                    logger.error('Path "%s" does not exist in the report', path)
                    raise KeyError(path)
                cursor_element[path_element] = {}
            cursor_element = cursor_element[path_element]
        cursor_element[path_list[-1]] = contents

    def get_dump_string(self) -> str:
        return json.dumps(self.json, indent=2)

    def dump_to_file(self, filepath: str):
        """
        Writes the report to disk, creating the parent directory if needed.
        """
        directory = os.path.dirname(os.path.abspath(filepath))
        os.makedirs(directory, exist_ok=True)
        with open(filepath, 'w') as out_file:
            json.dump(self.json, out_file, indent=2)

    @classmethod
    def read_from_file(cls, filepath: str):
        with open(filepath, 'r') as in_file:
            return cls(json.load(in_file))
