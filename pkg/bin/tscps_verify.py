from tscps.scripts import verify_cli


if __name__ == "__main__":
    verify_cli()
