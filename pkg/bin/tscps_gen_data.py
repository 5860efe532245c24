from tscps.scripts import gen_data_cli


if __name__ == "__main__":
    gen_data_cli()
