# pylint: skip-file
import argparse
import re
import sys

LINT_LEVELS = {10: 10, 8: 10, 6: 7, 4: 5}


def read_target_scores(target_score: str) -> list:
    return [int(line) for line in target_score.split('\n') if line.strip() and not line.startswith('#')]


def is_passed(lint_output: str, target_lint_level: int) -> int:
    rating = re.search(r'Your code has been rated at (-?\d+)\.\d+', lint_output)
    if not rating:
        print('\nPylint did not report a rating:\n')
        print(lint_output)
        return 1
    lint_score = int(rating.group(1))

    if lint_score < target_lint_level:
        print(f'\nLint rating {lint_score} is below the target {target_lint_level}.')
        print('Issues reported by pylint:\n')
        print(lint_output)
        return 1
    if lint_score != 10:
        print('\nLint check passed but there are things to improve:\n')
        print(lint_output)
        return 0
    print('\nLint rating is 10, nothing to fix.\n')
    return 0


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Compares the pylint rating with the strictest target score')
    parser.add_argument('--lint-output', type=str, help='Output from pylint command')
    parser.add_argument('--target-score', type=str, help='Content of target_score.txt')
    args: argparse.Namespace = parser.parse_args()

    scores = read_target_scores(args.target_score)
    target_lint_level = LINT_LEVELS.get(max(scores, default=0), 0)
    if not target_lint_level:
        print('\nInvalid value for target score: accepted are 4, 6, 8, 10.\n')
        sys.exit(1)
    sys.exit(is_passed(args.lint_output, target_lint_level))
