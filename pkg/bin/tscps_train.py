from tscps.scripts import train_cli


if __name__ == "__main__":
    train_cli()
