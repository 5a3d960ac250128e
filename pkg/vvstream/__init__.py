import dataclasses
import os

from flask import Flask
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def default_config() -> dict:
    """Every pipeline default under its config key."""
    from vvstream.pipeline import PipelineConfig

    return {f.name.upper(): f.default for f in dataclasses.fields(PipelineConfig)}


def create_app(test_config=None):
    app = Flask(__name__, instance_relative_config=True)
    app.config.from_mapping(
        SECRET_KEY='dev',
        LOG_LEVEL='INFO',
        **default_config(),
    )

    if test_config is None:
        # load the instance config, if it exists, when not testing
        app.config.from_pyfile('config.py', silent=True)
        app.config.from_prefixed_env('VVSTREAM')
    else:
        # load the test config if passed in
        app.config.from_mapping(test_config)

    # ensure the instance folder exists
    try:
        os.makedirs(app.instance_path)
    except OSError:
        pass

    app.logger.setLevel(app.config['LOG_LEVEL'])

    from . import server
    server.init_app(app)
    app.register_blueprint(server.bp)

    from .cli import cli
    app.cli.add_command(cli, 'vv')

    return app
