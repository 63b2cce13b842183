"""Entry point for ``python -m jedi_defense.oracle_server``."""

from jedi_defense.oracle import main

if __name__ == "__main__":
    main()
