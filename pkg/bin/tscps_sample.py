from tscps.scripts import sample_cli


if __name__ == "__main__":
    sample_cli()
